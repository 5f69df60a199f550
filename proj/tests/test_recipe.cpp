#include <doctest.h>

#include <random>

#include "gradmerge/recipe.hpp"
#include "gradmerge/toy_model.hpp"
#include "support.hpp"
#include "toy_files.hpp"

using namespace gradmerge;

namespace {

Json reason_any_doc() {
  return {{"method", "reason-any"},
          {"base", "b.safetensors"},
          {"task_model", "t.safetensors"},
          {"reasoning_model", "r.safetensors"},
          {"task_importance", "it.safetensors"},
          {"reasoning_importance", "ir.safetensors"},
          {"output", "out.safetensors"}};
}

}  // namespace

TEST_CASE("recipe defaults") {
  const auto r = parse_recipe(reason_any_doc());
  CHECK(r.method == MergeMethod::reason_any);
  CHECK(r.params.p_t == 0.05);
  CHECK(r.params.p_r == 0.05);
  CHECK(r.params.lambda_t == 1.0);
  CHECK(r.params.lambda_r == 1.0);
  CHECK(r.params.scope == SelectionScope::global);
  CHECK(r.params.zero_policy == ZeroPolicy::include);
  CHECK(r.report_output == "out.safetensors.report.json");
  const Json echo = r.to_json();
  CHECK(echo["p_t"] == 0.05);
  CHECK(echo["dtype_policy"] == "keep");
  CHECK(parse_recipe(echo).to_json() == echo);

  Json ta = {{"method", "task-arithmetic"}, {"base", "b"}, {"task_model", "t"}, {"reasoning_model", "r"}, {"output", "o"}};
  CHECK(parse_recipe(ta).params.lambda_t == 0.3);
  ta["method"] = "dare";
  CHECK(parse_recipe(ta).drop_rate == 0.9);
  ta["method"] = "ties";
  CHECK(parse_recipe(ta).density == doctest::Approx(0.1));
  CHECK(parse_recipe(ta).params.lambda_r == 0.3);
  ta.erase("base");
  ta["method"] = "linear";
  CHECK(parse_recipe(ta).weights == std::vector<double>{0.5, 0.5});
}

TEST_CASE("recipe strictness") {
  Json doc = reason_any_doc();
  doc["lamda_t"] = 1.0;
  CHECK(testing::error_message_of([&] { parse_recipe(doc); }).find("unknown recipe key 'lamda_t'") != std::string::npos);
  doc = reason_any_doc();
  doc["density"] = 0.5;
  CHECK(testing::error_message_of([&] { parse_recipe(doc); }).find("does not apply") != std::string::npos);
  doc = reason_any_doc();
  doc.erase("task_importance");
  CHECK(testing::error_message_of([&] { parse_recipe(doc); }).find("requires recipe key 'task_importance'") != std::string::npos);
  doc = reason_any_doc();
  doc["p_t"] = 1.5;
  CHECK(testing::error_kind_of([&] { parse_recipe(doc); }) == ErrorKind::validation);
  doc = reason_any_doc();
  doc["scope"] = "sideways";
  CHECK_THROWS_AS(parse_recipe(doc), Error);
  doc = reason_any_doc();
  doc["method"] = "fuse";
  CHECK(testing::error_kind_of([&] { parse_recipe(doc); }) == ErrorKind::validation);
  Json dare = {{"method", "dare"}, {"base", "b"}, {"task_model", "t"}, {"reasoning_model", "r"}, {"output", "o"}, {"drop_rate", 1.0}};
  CHECK(testing::error_kind_of([&] { parse_recipe(dare); }) == ErrorKind::validation);
  dare["drop_rate"] = 0.5;
  dare["lambda_t"] = 0.3;
  dare["lambda_r"] = 0.4;
  CHECK(testing::error_kind_of([&] { parse_recipe(dare); }) == ErrorKind::validation);
  dare.erase("lambda_r");
  CHECK(parse_recipe(dare).params.lambda_r == 0.3);
}

TEST_CASE("recipe files and overrides") {
  testing::TempDir dir;
  testing::spit(dir.file("r.json"), reason_any_doc().dump());
  const auto r = load_recipe(dir.file("r.json"), Json{{"p_t", 0.1}, {"lambda_r", 0.5}});
  CHECK(r.params.p_t == 0.1);
  CHECK(r.params.lambda_r == 0.5);
  CHECK(r.params.lambda_t == 1.0);
  testing::spit(dir.file("dup.json"), R"({"method":"linear","method":"ties"})");
  CHECK(testing::error_kind_of([&] { load_recipe(dir.file("dup.json")); }) == ErrorKind::format);
}

TEST_CASE("running recipes end to end") {
  testing::TempDir dir;
  const testing::ToyFiles f = testing::write_toy_files(dir, 21);
  Json doc = {{"method", "reason-any"},
              {"base", f.base},
              {"task_model", f.task},
              {"reasoning_model", f.reasoning},
              {"task_importance", {{"calibration", f.calib_t}}},
              {"reasoning_importance", {{"calibration", f.calib_r}, {"samples", 5}}},
              {"p_t", 0.2},
              {"p_r", 0.3},
              {"output", dir.file("merged.safetensors")}};
  const auto recipe = parse_recipe(doc);
  const auto report = run_recipe(recipe, 1);
  CHECK(report.method == "reason-any");
  const WeightMap merged = open_checkpoint(recipe.output);
  CHECK(merged.metadata().at("merge_method") == "reason-any");
  const Json written = Json::parse(testing::slurp(recipe.report_output));
  CHECK(written["recipe"]["reasoning_importance"]["samples"] == 5);
  CHECK(written["recipe"]["lambda_t"] == 1.0);
  CHECK(written["masks"]["task_selected"] == report.task_selected);

  // Same merge from importance files gives the same checkpoint.
  const auto model_t = ToyModel::from_weight_map(open_checkpoint(f.task));
  const auto model_r = ToyModel::from_weight_map(open_checkpoint(f.reasoning));
  write_importance(dir.file("it.safetensors"), toy_importance(model_t, load_calibration(f.calib_t), f.task));
  write_importance(dir.file("ir.safetensors"), toy_importance(model_r, load_calibration(f.calib_r, 5), f.reasoning));
  doc["task_importance"] = dir.file("it.safetensors");
  doc["reasoning_importance"] = dir.file("ir.safetensors");
  doc["output"] = dir.file("merged2.safetensors");
  run_recipe(parse_recipe(doc), 4);
  CHECK(testing::slurp(dir.file("merged.safetensors")) == testing::slurp(dir.file("merged2.safetensors")));

  for (const char* method : {"task-arithmetic", "ties", "dare", "linear"}) {
    Json b = {{"method", method}, {"task_model", f.task}, {"reasoning_model", f.reasoning},
              {"output", dir.file(std::string(method) + ".safetensors")}};
    if (std::string(method) != "linear") b["base"] = f.base;
    CAPTURE(method);
    CHECK(run_recipe(parse_recipe(b)).method == method);
    CHECK(std::filesystem::exists(dir.file(std::string(method) + ".safetensors.report.json")));
  }
}

TEST_CASE("failed runs leave no outputs") {
  testing::TempDir dir;
  const testing::ToyFiles f = testing::write_toy_files(dir, 5);
  Json doc = {{"method", "task-arithmetic"}, {"base", f.base}, {"task_model", f.task},
              {"reasoning_model", f.reasoning}, {"output", dir.file("o.safetensors")},
              {"report_output", dir.file("missing-dir/report.json")}};
  CHECK(testing::error_kind_of([&] { run_recipe(parse_recipe(doc)); }) == ErrorKind::io);
  CHECK_FALSE(std::filesystem::exists(dir.file("o.safetensors")));
  doc["report_output"] = dir.file("report.json");
  doc["base"] = dir.file("nope.safetensors");
  CHECK(testing::error_kind_of([&] { run_recipe(parse_recipe(doc)); }) == ErrorKind::io);
  CHECK_FALSE(std::filesystem::exists(dir.file("report.json")));
}
