#include <doctest.h>

#include <cmath>
#include <random>

#include "gradmerge/merge.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace gradmerge;

namespace {

const std::vector<std::string> kNames = {"emb", "l0.bias", "l0.weight", "l1.weight"};

struct Trio {
  WeightMap base{"base"};
  WeightMap task{"task"};
  WeightMap reasoning{"reasoning"};
};

// Values on a 2^-10 grid, so fine - base and base + delta are exact in f32.
Trio grid_trio(std::mt19937_64& rng) {
  Trio t;
  for (const auto& name : kNames) {
    const Shape shape = {static_cast<std::int64_t>(2 + rng() % 5), static_cast<std::int64_t>(1 + rng() % 7)};
    const auto n = element_count(shape);
    t.base.insert_values<float>(name, DType::F32, shape, testing::grid_floats(rng, n));
    t.task.insert_values<float>(name, DType::F32, shape, testing::grid_floats(rng, n));
    t.reasoning.insert_values<float>(name, DType::F32, shape, testing::grid_floats(rng, n));
  }
  return t;
}

ImportanceMap importance_like(const WeightMap& model, std::mt19937_64& rng) {
  WeightMap scores("imp");
  for (const auto& [name, e] : model.entries()) {
    auto v = testing::random_floats(rng, e.meta.element_count());
    for (auto& x : v) x = std::fabs(x);
    scores.insert_values<float>(name, DType::F32, e.meta.shape, v);
  }
  return ImportanceMap(std::move(scores), {"calib", 100, model.id()});
}

TaskVector tv_of(const WeightMap& fine, const WeightMap& base) {
  const WeightMap* maps[] = {&base, &fine};
  return compute_task_vector(fine, base, validate_compatibility(maps));
}

WeightMap materialize(const WeightMap& m) {
  WeightMap out(m.id());
  for (const auto& [name, e] : m.entries()) out.insert_bytes(e.meta, m.bytes(name));
  return out;
}

}  // namespace

TEST_CASE("reason-any reconstruction identities") {
  std::mt19937_64 rng(1);
  const Trio t = grid_trio(rng);
  const auto imp_t = importance_like(t.task, rng);
  const auto imp_r = importance_like(t.reasoning, rng);

  SUBCASE("zero scaling returns the base") {
    ReasonAnyParams p;
    p.lambda_t = p.lambda_r = 0.0;
    p.p_t = p.p_r = 0.3;
    CHECK(testing::same_bytes(reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p).merged, t.base));
  }
  SUBCASE("full selection empties both masks") {
    ReasonAnyParams p;
    p.p_t = p.p_r = 1.0;
    const auto r = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p);
    CHECK(testing::same_bytes(r.merged, t.base));
    CHECK(r.report.task_final == 0);
    CHECK(r.report.reasoning_final == 0);
    CHECK(r.report.warnings.size() == 2);
  }
  SUBCASE("reasoning only") {
    ReasonAnyParams p;
    p.p_t = 0.0;
    p.p_r = 1.0;
    p.lambda_r = 1.0;
    const auto r = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p);
    for (const auto& name : kNames) {
      const auto b = t.base.values<float>(name);
      const auto f = t.reasoning.values<float>(name);
      const auto m = r.merged.values<float>(name);
      for (std::size_t i = 0; i < b.size(); ++i) CHECK(m[i] == b[i] + (f[i] - b[i]));
      CHECK(m == f);  // the grid makes the reconstruction exact
    }
  }
}

TEST_CASE("reason-any matches the dense oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const Trio t = grid_trio(rng);
    const auto imp_t = importance_like(t.task, rng);
    const auto imp_r = importance_like(t.reasoning, rng);
    ReasonAnyParams p;
    p.p_t = static_cast<double>(rng() % 101) / 100.0;
    p.p_r = static_cast<double>(rng() % 101) / 100.0;
    p.lambda_t = static_cast<double>(rng() % 9) / 4.0;
    p.lambda_r = static_cast<double>(rng() % 9) / 4.0;
    p.scope = trial % 3 == 0 ? SelectionScope::per_tensor : SelectionScope::global;
    const auto r = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p);

    const auto scores_t = oracle::scores_of(imp_t);
    const auto scores_r = oracle::scores_of(imp_r);
    const auto n_t = p.scope == SelectionScope::global ? oracle::select(scores_t, p.p_t, true)
                                                       : oracle::select_per_tensor(scores_t, p.p_t, true);
    const auto n_r = p.scope == SelectionScope::global ? oracle::select(scores_r, p.p_r, false)
                                                       : oracle::select_per_tensor(scores_r, p.p_r, false);
    const auto m_t = oracle::minus(n_t, n_r);
    const auto m_r = oracle::minus(n_r, n_t);
    CHECK(oracle::mask_of(r.task_mask) == m_t);
    CHECK(oracle::mask_of(r.reasoning_mask) == m_r);
    CHECK(r.report.task_selected == oracle::count(n_t));
    CHECK(r.report.reasoning_selected == oracle::count(n_r));
    CHECK(r.report.task_final + r.report.reasoning_final + 2 * r.report.overlap ==
          r.report.task_selected + r.report.reasoning_selected);
    for (const auto& name : kNames) {
      const auto b = t.base.values<float>(name);
      const auto ft = t.task.values<float>(name);
      const auto fr = t.reasoning.values<float>(name);
      const auto out = r.merged.bytes(name);
      const auto expect_base = t.base.bytes(name);
      const auto m = r.merged.values<float>(name);
      for (std::size_t i = 0; i < b.size(); ++i) {
        CHECK_FALSE((m_t.at(name)[i] && m_r.at(name)[i]));
        float want = b[i];
        if (m_t.at(name)[i]) want = oracle::masked_update(b[i], ft[i], p.lambda_t);
        if (m_r.at(name)[i]) want = oracle::masked_update(b[i], fr[i], p.lambda_r);
        CHECK(std::bit_cast<std::uint32_t>(m[i]) == std::bit_cast<std::uint32_t>(want));
      }
    }
  }
}

TEST_CASE("constructed disjoint supports reproduce the union model") {
  std::mt19937_64 rng(3);
  const Trio raw = grid_trio(rng);
  const WeightMap& base = raw.base;
  WeightMap task("task"), reasoning("reasoning"), union_model("union");
  WeightMap imp_t_scores, imp_r_scores;
  std::uint64_t d = 0, support_t = 0, support_r = 0;
  for (const auto& name : kNames) {
    const auto& meta = base.meta(name);
    const auto b = base.values<float>(name);
    const auto ft_raw = raw.task.values<float>(name);
    const auto fr_raw = raw.reasoning.values<float>(name);
    std::vector<float> ft = b, fr = b, u = b, it(b.size()), ir(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto which = rng() % 3;  // 0: task support, 1: reasoning support, 2: neither
      it[i] = which == 0 ? 10.0f + static_cast<float>(rng() % 100) : static_cast<float>(rng() % 100) / 100.0f;
      ir[i] = which == 1 ? static_cast<float>(rng() % 100) / 1000.0f : 1.0f + static_cast<float>(rng() % 100);
      if (which == 0) { ft[i] = ft_raw[i]; u[i] = b[i] + (ft[i] - b[i]); ++support_t; }
      if (which == 1) { fr[i] = fr_raw[i]; u[i] = b[i] + (fr[i] - b[i]); ++support_r; }
    }
    d += b.size();
    task.insert_values<float>(name, DType::F32, meta.shape, ft);
    reasoning.insert_values<float>(name, DType::F32, meta.shape, fr);
    union_model.insert_values<float>(name, DType::F32, meta.shape, u);
    imp_t_scores.insert_values<float>(name, DType::F32, meta.shape, it);
    imp_r_scores.insert_values<float>(name, DType::F32, meta.shape, ir);
  }
  ReasonAnyParams p;
  p.p_t = static_cast<double>(support_t) / static_cast<double>(d);
  p.p_r = static_cast<double>(support_r) / static_cast<double>(d);
  p.lambda_t = p.lambda_r = 1.0;
  const auto r = reason_any_merge(base, task, reasoning, ImportanceMap(imp_t_scores, {}),
                                  ImportanceMap(imp_r_scores, {}), p);
  CHECK(r.report.overlap == 0);
  CHECK(r.report.task_final == support_t);
  CHECK(r.report.reasoning_final == support_r);
  CHECK(testing::same_bytes(r.merged, union_model));
}

TEST_CASE("reason-any errors, warnings and skipped tensors") {
  std::mt19937_64 rng(4);
  Trio t = grid_trio(rng);
  auto imp_t = importance_like(t.task, rng);
  auto imp_r = importance_like(t.reasoning, rng);
  SUBCASE("importance shape mismatch") {
    WeightMap bad;
    for (const auto& [name, e] : imp_r.scores().entries()) {
      if (name == "emb") {
        bad.insert_values<float>(name, DType::F32, {static_cast<std::int64_t>(e.meta.element_count())},
                                 imp_r.values(name));
      } else {
        bad.insert(e.meta, e.producer);
      }
    }
    const auto msg = testing::error_message_of([&] {
      reason_any_merge(t.base, t.task, t.reasoning, imp_t, ImportanceMap(bad, {}), {});
    });
    CHECK(msg.find("importance shape mismatch for emb") != std::string::npos);
  }
  SUBCASE("empty eligible set") {
    MergeOptions options;
    options.filters.include = {"nothing*"};
    CHECK(testing::error_kind_of([&] {
            reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, {}, options);
          }) == ErrorKind::consistency);
  }
  SUBCASE("skipped tensors are copied from the base") {
    t.base.insert_bytes({"step", DType::I64, {1}, 0, 0}, Bytes(8, std::byte{7}));
    t.task.insert_bytes({"step", DType::I64, {1}, 0, 0}, Bytes(8, std::byte{1}));
    t.reasoning.insert_bytes({"step", DType::I64, {1}, 0, 0}, Bytes(8, std::byte{2}));
    MergeOptions options;
    options.filters.exclude = {"emb"};
    ReasonAnyParams p;
    p.p_t = p.p_r = 0.5;
    const auto r = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p, options);
    CHECK(r.merged.bytes("step") == t.base.bytes("step"));
    CHECK(r.merged.bytes("emb") == t.base.bytes("emb"));
    CHECK(r.report.skipped.size() == 2);
    const Json j = r.report.to_json();
    CHECK(j["skipped"][0]["name"] == "emb");
    CHECK(j["skipped"][0]["reason"] == "filtered");
    CHECK(j["masks"]["task_final"] == r.report.task_final);
  }
}

TEST_CASE("reason-any does not depend on thread count or precision of bookkeeping") {
  std::mt19937_64 rng(5);
  const Trio t = grid_trio(rng);
  const auto imp_t = importance_like(t.task, rng);
  const auto imp_r = importance_like(t.reasoning, rng);
  ReasonAnyParams p;
  p.p_t = p.p_r = 0.2;
  MergeOptions one, four;
  one.threads = 1;
  four.threads = 4;
  const auto a = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p, one);
  const auto b = reason_any_merge(t.base, t.task, t.reasoning, imp_t, imp_r, p, four);
  CHECK(testing::same_bytes(a.merged, b.merged));
  CHECK(a.task_mask == b.task_mask);
}

TEST_CASE("linear merge") {
  WeightMap a("a"), b("b");
  a.insert_values<float>("w", DType::F32, {1}, {2.0f});
  b.insert_values<float>("w", DType::F32, {1}, {4.0f});
  const WeightMap models[] = {a, b};
  const double w1[] = {0.25, 0.75};
  CHECK(linear_merge(models, w1).values<float>("w") == std::vector<float>{3.5f});
  const double w2[] = {1.0, 0.0};
  CHECK(testing::same_bytes(linear_merge(models, w2), a));
  const WeightMap same[] = {a, a};
  const double half[] = {0.5, 0.5};
  CHECK(testing::same_bytes(linear_merge(same, half), a));
  const double bad[] = {0.5, 0.6};
  CHECK(testing::error_kind_of([&] { linear_merge(models, bad); }) == ErrorKind::validation);
  WeightMap c = b;
  c.insert_values<float>("extra", DType::F32, {1}, {1.0f});
  const WeightMap mismatched[] = {a, c};
  CHECK(testing::error_kind_of([&] { linear_merge(mismatched, half); }) == ErrorKind::consistency);
}

TEST_CASE("task arithmetic") {
  std::mt19937_64 rng(6);
  const Trio t = grid_trio(rng);
  const TaskVector tvs[] = {tv_of(t.task, t.base), tv_of(t.reasoning, t.base)};
  CHECK(testing::same_bytes(task_arithmetic_merge(t.base, tvs, 0.0), t.base));
  CHECK(testing::same_bytes(task_arithmetic_merge(t.base, std::span(tvs, 1), 1.0), t.task));
  const auto merged = task_arithmetic_merge(t.base, tvs, 0.3);
  for (const auto& name : kNames) {
    const auto b = t.base.values<float>(name);
    const auto x = t.task.values<float>(name);
    const auto y = t.reasoning.values<float>(name);
    const auto m = merged.values<float>(name);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const float sum = (x[i] - b[i]) + (y[i] - b[i]);
      const float inc = 0.3f * sum;
      CHECK(std::bit_cast<std::uint32_t>(m[i]) == std::bit_cast<std::uint32_t>(b[i] + inc));
    }
  }
}

TEST_CASE("TIES") {
  WeightMap base("base");
  base.insert_values<float>("w", DType::F32, {4}, {0, 0, 0, 0});
  auto fine = [](std::vector<float> v) {
    WeightMap m("f");
    m.insert_values<float>("w", DType::F32, {4}, v);
    return m;
  };
  SUBCASE("sign election ties go positive") {
    const TaskVector tvs[] = {tv_of(fine({2, 1, 0, 0}), base), tv_of(fine({-2, 1, 0, 0}), base)};
    const auto m = ties_merge(base, tvs, 1.0, 1.0).values<float>("w");
    CHECK(m == std::vector<float>{2, 1, 0, 0});
  }
  SUBCASE("identical vectors at density 0.5 give the trimmed vector") {
    const TaskVector tvs[] = {tv_of(fine({1, -4, 3, -2}), base), tv_of(fine({1, -4, 3, -2}), base)};
    CHECK(ties_merge(base, tvs, 1.0, 0.5).values<float>("w") == std::vector<float>{0, -4, 3, 0});
  }
  SUBCASE("magnitude ties keep the lower index") {
    const TaskVector tvs[] = {tv_of(fine({2, -2, 2, 1}), base)};
    CHECK(ties_merge(base, tvs, 1.0, 0.5).values<float>("w") == std::vector<float>{2, -2, 0, 0});
  }
  SUBCASE("disagreeing minority is dropped") {
    const TaskVector tvs[] = {tv_of(fine({3, 0, 0, 0}), base), tv_of(fine({1, 0, 0, 0}), base),
                              tv_of(fine({-2, 0, 0, 0}), base)};
    CHECK(ties_merge(base, tvs, 0.5, 1.0).values<float>("w") == std::vector<float>{1, 0, 0, 0});
  }
  SUBCASE("single vector at full density is task arithmetic") {
    std::mt19937_64 rng(7);
    const Trio t = grid_trio(rng);
    const TaskVector tvs[] = {tv_of(t.task, t.base)};
    CHECK(testing::same_bytes(ties_merge(t.base, tvs, 0.3, 1.0), task_arithmetic_merge(t.base, tvs, 0.3)));
  }
  CHECK(testing::error_kind_of([&] {
          const TaskVector tvs[] = {tv_of(fine({1, 1, 1, 1}), base)};
          ties_merge(base, tvs, 1.0, 0.0);
        }) == ErrorKind::usage);
}

TEST_CASE("DARE") {
  std::mt19937_64 rng(8);
  const Trio t = grid_trio(rng);
  const TaskVector tvs[] = {tv_of(t.task, t.base), tv_of(t.reasoning, t.base)};
  CHECK(testing::same_bytes(dare_merge(t.base, tvs, 0.3, 0.0, 99), task_arithmetic_merge(t.base, tvs, 0.3)));
  SUBCASE("survivors are scaled by exactly 1/(1-p)") {
    const TaskVector one[] = {tvs[0]};
    for (double p : {0.5, 0.9, 0.25}) {
      const auto merged = dare_merge(t.base, one, 1.0, p, 17);
      const float scale = static_cast<float>(1.0 / (1.0 - p));
      std::size_t dropped = 0, total = 0;
      for (const auto& name : kNames) {
        const auto b = t.base.values<float>(name);
        const auto delta = tvs[0].delta<float>(name);
        const auto m = merged.values<float>(name);
        for (std::size_t i = 0; i < b.size(); ++i) {
          ++total;
          const bool drop = dare_uniform(17, 0, name, i) < p;
          dropped += drop;
          const float inc = drop ? 0.0f : delta[i] * scale;
          CHECK(std::bit_cast<std::uint32_t>(m[i]) == std::bit_cast<std::uint32_t>(b[i] + inc));
          if (p == 0.5 && !drop) CHECK(m[i] - b[i] == 2.0f * delta[i]);
        }
      }
      CHECK(dropped <= total);
    }
  }
  SUBCASE("same seed, same output; other seed, other output") {
    CHECK(testing::same_bytes(dare_merge(t.base, tvs, 0.3, 0.9, 5), dare_merge(t.base, tvs, 0.3, 0.9, 5)));
    CHECK_FALSE(testing::same_bytes(dare_merge(t.base, tvs, 0.3, 0.9, 5), dare_merge(t.base, tvs, 0.3, 0.9, 6)));
  }
  CHECK(testing::error_kind_of([&] { dare_merge(t.base, tvs, 0.3, 1.0, 0); }) == ErrorKind::usage);
}

TEST_CASE("DARE stream matches the frozen reference vector") {
  for (const auto& c : testing::fixtures()["dare_uniform"]) {
    const auto seed = std::stoull(c["seed"].get<std::string>());
    const double want = std::strtod(c["value"].get<std::string>().c_str(), nullptr);
    CHECK(dare_uniform(seed, c["ordinal"].get<std::uint64_t>(), c["name"].get<std::string>(),
                       c["index"].get<std::uint64_t>()) == want);
  }
}

TEST_CASE("additive injection") {
  std::mt19937_64 rng(9);
  const Trio t = grid_trio(rng);
  const TaskVector tv = tv_of(t.task, t.base);
  const auto imp = importance_like(t.task, rng);
  CHECK(testing::same_bytes(additive_inject(t.base, tv, imp, 0.0, InjectDirection::highest,
                                            SelectionScope::global), t.base));
  CHECK(testing::same_bytes(additive_inject(t.base, tv, imp, 1.0, InjectDirection::lowest,
                                            SelectionScope::global), t.task));
  const auto top = additive_inject(t.base, tv, imp, 0.1, InjectDirection::highest, SelectionScope::global);
  const auto mask = oracle::select(oracle::scores_of(imp), 0.1, true);
  for (const auto& name : kNames) {
    const auto m = top.values<float>(name);
    const auto b = t.base.values<float>(name);
    const auto f = t.task.values<float>(name);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == (mask.at(name)[i] ? f[i] : b[i]));
  }
  CHECK(parse_direction("lowest") == InjectDirection::lowest);
  CHECK(testing::error_kind_of([] { parse_direction("sideways"); }) == ErrorKind::usage);
}

TEST_CASE("merge outputs are lazy until materialized") {
  std::mt19937_64 rng(10);
  const Trio t = grid_trio(rng);
  const TaskVector tvs[] = {tv_of(t.task, t.base)};
  const auto lazy = task_arithmetic_merge(t.base, tvs, 1.0);
  CHECK(testing::same_bytes(materialize(lazy), t.task));
}
