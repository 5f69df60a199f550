#include <iostream>

#include "gradmerge/cli.hpp"

int main(int argc, char** argv) { return gradmerge::run_cli(argc, argv, std::cout, std::cerr); }
