#include "gradmerge/parallel.hpp"

namespace gradmerge {

namespace {
std::atomic<unsigned> g_threads{1};
}

unsigned default_thread_count() { return g_threads.load(); }

void set_default_thread_count(unsigned threads) { g_threads.store(threads == 0 ? 1 : threads); }

}  // namespace gradmerge
