#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lisa;
using testutil::TempDir;

namespace {

json base_config_json() {
  return json::parse(R"({
    "schema_version": 1,
    "method": "lisa",
    "model": {"model_dim": 16, "num_heads": 2, "num_blocks": 4},
    "data": {"kind": "synthetic_copy", "vocab_size": 8, "seq_len": 8, "samples": 64, "seed": 3},
    "optimizer": {"lr": 0.001},
    "schedule": {"gamma": 2, "period": 5},
    "steps": 10,
    "batch_size": 4,
    "seed": 11,
    "output": "runs/x"
  })");
}

std::string config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string file(const fs::path& p) { return read_file(p.string()); }

}  // namespace

TEST(Config, ParsesAndRoundTrips) {
  const RunConfig c = run_config_from_json(base_config_json());
  EXPECT_EQ(c.method, Method::lisa);
  EXPECT_EQ(c.schedule->gamma, 2u);
  EXPECT_EQ(c.model.model_dim, 16u);
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
}

TEST(Config, UnknownKeyNamesTheField) {
  json j = base_config_json();
  j["optimizer"]["learning_rate"] = 0.1;
  EXPECT_NE(config_error(j).find("/optimizer/learning_rate"), std::string::npos) << config_error(j);
  j = base_config_json();
  j["stepz"] = 3;
  EXPECT_NE(config_error(j).find("stepz"), std::string::npos);
}

TEST(Config, WrongTypeNamesTheField) {
  json j = base_config_json();
  j["steps"] = "ten";
  EXPECT_NE(config_error(j).find("/steps"), std::string::npos) << config_error(j);
}

TEST(Config, MethodSectionsMustMatch) {
  json j = base_config_json();
  j.erase("schedule");
  EXPECT_NE(config_error(j).find("/schedule"), std::string::npos);
  j = base_config_json();
  j["method"] = "full";
  EXPECT_NE(config_error(j).find("/schedule"), std::string::npos);
  j.erase("schedule");
  j["lora"] = {{"rank", 2}};
  EXPECT_NE(config_error(j).find("/lora"), std::string::npos);
  j["method"] = "lora";
  EXPECT_EQ(config_error(j), "");
}

TEST(Config, RangeChecks) {
  json j = base_config_json();
  j["steps"] = 0;
  EXPECT_NE(config_error(j), "");
  j = base_config_json();
  j["schema_version"] = 2;
  EXPECT_NE(config_error(j).find("schema_version"), std::string::npos);
  j = base_config_json();
  j["optimizer"]["beta1"] = 1.5;
  EXPECT_NE(config_error(j).find("/optimizer"), std::string::npos);
}

TEST(Config, SyntaxErrorReportsLineAndColumn) {
  TempDir dir("cfg");
  const auto path = (dir.path() / "bad.json").string();
  write_file(path, "{\n  \"schema_version\": 1,\n  \"method\": full\n}\n");
  try {
    load_run_config(path);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json:3:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_run_config((dir.path() / "missing.json").string()), IoError);
}

TEST(Config, ShippedConfigsParse) {
  const fs::path root = fs::path(LISA_SOURCE_DIR) / "configs" / "desk";
  for (const char* name : {"full.json", "lisa.json", "lora.json", "modsum_lisa.json", "text_full.json"}) {
    EXPECT_NO_THROW(load_run_config((root / name).string())) << name;
  }
  EXPECT_NO_THROW(quad_config_from_json(json::parse(read_file((root / "quad.json").string()))));
}

TEST(Config, PublishedPresetsMatchTable) {
  const json j = json::parse(read_file((fs::path(LISA_SOURCE_DIR) / "configs/published/hyperparameters.json").string()));
  const json& p = j.at("presets");
  EXPECT_EQ(p.at("gpt2-small").at("full").at("lr"), 3e-4);
  EXPECT_EQ(p.at("gpt2-small").at("lisa").at("lr"), 6e-4);
  EXPECT_EQ(p.at("gpt2-small").at("lisa").at("period"), 3);
  EXPECT_EQ(p.at("tinyllama").at("lisa").at("period"), 10);
  EXPECT_EQ(p.at("llama-2-70b").at("lisa").at("gamma"), 4);
  EXPECT_EQ(p.at("llama-2-70b").at("lisa").at("period"), 50);
  for (const auto& [name, v] : p.items()) {
    EXPECT_NO_THROW(arch_preset(name)) << name;
    EXPECT_EQ(v.at("lora").at("rank"), 128);
  }
}

TEST(RunLogIo, RoundTrip) {
  TempDir dir("runlog");
  RunConfig c = testutil::desk_run(Method::lisa, 12, (dir.path() / "a").string());
  const RunLog log = run_config(c, dir.path() / "a");
  const RunLog back = import_run(dir.path() / "a");
  EXPECT_EQ(back, log);
}

TEST(RunLogIo, EmptyRunWritesManifestOnly) {
  TempDir dir("runlog");
  RunLog log;
  log.method = "full";
  export_run(log, dir.path() / "e");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir.path() / "e")) names.push_back(entry.path().filename().string());
  EXPECT_EQ(names, (std::vector<std::string>{"manifest.json"}));
}

TEST(RunLogIo, HeadersAndManifest) {
  TempDir dir("runlog");
  RunConfig c = testutil::desk_run(Method::lisa, 6, "unused");
  run_config(c, dir.path());
  EXPECT_EQ(file(dir.path() / "loss.csv").substr(0, 13), "step,loss,lr\n");
  EXPECT_EQ(lines_of(file(dir.path() / "norms.csv")).front(), "layer_index,layer_name,mean_weight_norm");
  const json first = json::parse(lines_of(file(dir.path() / "masks.jsonl")).front());
  EXPECT_TRUE(first.contains("period"));
  EXPECT_TRUE(first.contains("active"));
  EXPECT_TRUE(first.contains("memory_bytes"));
  const json m = json::parse(file(dir.path() / "manifest.json"));
  EXPECT_EQ(m.at("config_hash"), sha256_hex(m.at("config").dump()));
  for (const auto& [name, hash] : m.at("files").items()) {
    if (hash.is_null()) continue;
    EXPECT_EQ(hash, sha256_hex(file(dir.path() / name))) << name;
  }
  EXPECT_TRUE(m.at("files").at("timing.csv").is_null());
  EXPECT_EQ(m.at("version").get<std::string>().substr(0, 1), "v");
}

TEST(RunLogIo, ExportIsDeterministic) {
  TempDir dir("runlog");
  for (Method method : {Method::full, Method::lora, Method::lisa}) {
    RunConfig c = testutil::desk_run(method, 8, "unused");
    run_config(c, dir.path() / "a");
    run_config(c, dir.path() / "b");
    const json m = json::parse(file(dir.path() / "a" / "manifest.json"));
    for (const auto& [name, hash] : m.at("files").items()) {
      if (hash.is_null()) continue;
      EXPECT_EQ(file(dir.path() / "a" / name), file(dir.path() / "b" / name)) << name;
    }
    EXPECT_EQ(file(dir.path() / "a" / "manifest.json"), file(dir.path() / "b" / "manifest.json"));
  }
}

TEST(RunLogIo, SchemaIdenticalAcrossMethods) {
  TempDir dir("runlog");
  std::vector<std::string> headers;
  for (Method method : {Method::full, Method::lora, Method::lisa}) {
    RunConfig c = testutil::desk_run(method, 5, "unused");
    const fs::path out = dir.path() / to_string(method);
    run_config(c, out);
    headers.push_back(lines_of(file(out / "loss.csv")).front() + "|" + lines_of(file(out / "norms.csv")).front());
    EXPECT_NO_THROW(import_run(out));
  }
  EXPECT_EQ(headers[0], headers[1]);
  EXPECT_EQ(headers[1], headers[2]);
}

TEST(Checkpoint, RoundTripIsByteStable) {
  auto m = TransformerModel::build(testutil::tiny_config(), 5);
  LoraConfig lc{.rank = 2, .include_head = true};
  attach_adapters(m, lc, 1);
  AdamW opt({.lr = 0.01});
  for (auto& g : m.adapter_groups())
    for (auto& p : g.params) std::fill(p.tensor.grad_buffer().begin(), p.tensor.grad_buffer().end(), 0.1);
  opt.step(m.adapter_groups());
  const std::string bytes = serialize_checkpoint(m, lc, &opt);
  Checkpoint ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(ck.model.config(), m.config());
  ASSERT_TRUE(ck.lora);
  EXPECT_EQ(ck.lora->rank, lc.rank);
  EXPECT_EQ(ck.lora->effective_alpha(), lc.effective_alpha());
  EXPECT_EQ(ck.lora->include_head, lc.include_head);
  ASSERT_TRUE(ck.optimizer);
  EXPECT_EQ(serialize_checkpoint(ck.model, ck.lora, &*ck.optimizer), bytes);
}

TEST(Checkpoint, FileRoundTripAndErrors) {
  TempDir dir("ckpt");
  auto m = TransformerModel::build(testutil::tiny_config(), 5);
  const auto path = (dir.path() / "m.ckpt").string();
  save_checkpoint(path, m);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(ck.model, std::nullopt, nullptr), read_file(path));
  std::string bytes = read_file(path);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), DataError);
  EXPECT_THROW(load_checkpoint((dir.path() / "none.ckpt").string()), IoError);
}

TEST(Checkpoint, MergedModelIsPlainBaseCheckpoint) {
  auto m = TransformerModel::build(testutil::tiny_config(), 5);
  attach_adapters(m, {.rank = 2}, 1);
  merge_adapters(m);
  const Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(m, std::nullopt, nullptr));
  EXPECT_FALSE(ck.lora);
  EXPECT_FALSE(ck.model.has_adapters());
}

TEST(Harness, OutputRootFromEnvironment) {
  ::setenv(kOutputRootEnv, "/tmp/lisa_root", 1);
  EXPECT_EQ(resolve_output("runs/a"), fs::path("/tmp/lisa_root/runs/a"));
  EXPECT_EQ(resolve_output("/abs/b"), fs::path("/abs/b"));
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_output("runs/a"), fs::path("runs/a"));
}

TEST(Harness, LisaWithAllLayersEqualsFull) {
  TempDir dir("equiv");
  RunConfig full = testutil::desk_run(Method::full, 15, "unused");
  RunConfig lisa = testutil::desk_run(Method::lisa, 15, "unused");
  lisa.schedule->gamma = 4;
  lisa.schedule->period = 4;
  run_config(full, dir.path() / "full");
  run_config(lisa, dir.path() / "lisa");
  EXPECT_EQ(file(dir.path() / "full" / "loss.csv"), file(dir.path() / "lisa" / "loss.csv"));
}

TEST(Harness, DivergencePreservesPartialLogs) {
  TempDir dir("diverge");
  RunConfig c = testutil::desk_run(Method::full, 30, "unused");
  c.optimizer.lr = 1e300;
  const RunLog log = run_config(c, dir.path());
  EXPECT_EQ(log.status, RunStatus::diverged);
  EXPECT_FALSE(log.message.empty());
  EXPECT_LT(log.steps.size(), 30u);
  const json m = json::parse(file(dir.path() / "manifest.json"));
  EXPECT_EQ(m.at("status"), "diverged");
}

TEST(Harness, SeedsGiveDistinctCurves) {
  TempDir dir("seeds");
  RunConfig base = testutil::desk_run(Method::lisa, 10, (dir.path() / "sweep").string());
  const auto rows = sweep(base, SweepAxis::seed, {1, 2, 3});
  ASSERT_EQ(rows.size(), 3u);
  std::set<std::string> curves;
  for (std::uint64_t s : {1, 2, 3}) {
    EXPECT_EQ(rows[s - 1].status, "completed");
    curves.insert(file(dir.path() / "sweep" / ("seed_" + std::to_string(s)) / "loss.csv"));
  }
  EXPECT_EQ(curves.size(), 3u);
  EXPECT_EQ(lines_of(file(dir.path() / "sweep" / "summary.csv")).size(), 4u);
}

TEST(Harness, SweepGammaBytesIncrease) {
  TempDir dir("gamma");
  RunConfig base = testutil::desk_run(Method::lisa, 5, (dir.path() / "g").string());
  const auto rows = sweep(base, SweepAxis::gamma, {1, 2, 4});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LT(rows[0].peak_estimated_bytes, rows[1].peak_estimated_bytes);
  EXPECT_LT(rows[1].peak_estimated_bytes, rows[2].peak_estimated_bytes);
  EXPECT_LT(rows[0].mean_trainable_params, rows[2].mean_trainable_params);
}

TEST(Harness, SweepContinuesPastFailures) {
  TempDir dir("fail");
  RunConfig base = testutil::desk_run(Method::lisa, 5, (dir.path() / "f").string());
  const auto rows = sweep(base, SweepAxis::gamma, {2, 9, 1});  // 9 > N_L
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].status, "completed");
  EXPECT_EQ(rows[1].status, "error");
  EXPECT_EQ(rows[2].status, "completed");
  EXPECT_EQ(lines_of(file(dir.path() / "f" / "summary.csv")).size(), 4u);
  EXPECT_EQ(lines_of(file(dir.path() / "f" / "summary.csv")).front(),
            "axis_value,final_loss,mean_trainable_params,peak_estimated_bytes,status,message");
}

TEST(Harness, SweepAxisMustFitMethod) {
  RunConfig base = testutil::desk_run(Method::full, 5, "unused");
  EXPECT_THROW(sweep(base, SweepAxis::gamma, {1}), ConfigError);
  EXPECT_THROW(sweep(base, SweepAxis::rank, {1}), ConfigError);
  EXPECT_THROW(parse_axis("depth"), ConfigError);
}

TEST(PlotData, SingleRunColumns) {
  TempDir dir("plot");
  run_config(testutil::desk_run(Method::full, 4, "unused"), dir.path() / "r");
  const PlotData d = plot_data(std::vector<fs::path>{dir.path() / "r"}, dir.path() / "out");
  EXPECT_EQ(lines_of(d.loss_csv).front(), "step,loss");
  EXPECT_EQ(lines_of(d.loss_csv).size(), 5u);
  EXPECT_EQ(lines_of(d.norms_csv).front(), "layer_index,layer_name,mean_weight_norm");
  EXPECT_TRUE(fs::exists(dir.path() / "out" / "loss.csv"));
}

TEST(PlotData, UnequalLengthsArePadded) {
  TempDir dir("plot");
  run_config(testutil::desk_run(Method::full, 6, "unused"), dir.path() / "long");
  run_config(testutil::desk_run(Method::lora, 3, "unused"), dir.path() / "short");
  const PlotData d = plot_data(std::vector<fs::path>{dir.path() / "long", dir.path() / "short"}, dir.path() / "out");
  const auto rows = lines_of(d.loss_csv);
  EXPECT_EQ(rows.front(), "step,loss_long,loss_short");
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[6].back(), ',');  // empty cell, not extrapolated
  EXPECT_TRUE(d.warnings.empty());
  EXPECT_EQ(lines_of(d.norms_csv).front(), "layer_index,layer_name,norm_long,norm_short");
}

TEST(PlotData, MismatchedGridsWarn) {
  RunLog a, b;
  for (std::size_t s = 1; s <= 6; ++s) a.steps.push_back({s, 1.0 / s, 0.1});
  for (std::size_t s = 2; s <= 6; s += 2) b.steps.push_back({s, 2.0 / s, 0.1});
  const PlotData d = plot_data({a, b}, {"a", "b"});
  ASSERT_EQ(d.warnings.size(), 1u);
  const auto rows = lines_of(d.loss_csv);
  EXPECT_EQ(rows.size(), 4u);  // header + steps 2, 4, 6
  EXPECT_EQ(rows[1].substr(0, 2), "2,");
}

TEST(Quad, DefaultProblemConverges) {
  QuadConfig q;
  q.steps = {100, 1000};
  const QuadResult r = run_quad_config(q);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_LT(r.rows[1].avg_suboptimality, r.rows[0].avg_suboptimality);
  EXPECT_DOUBLE_EQ(r.rows[0].scaled, r.rows[0].avg_suboptimality * 10.0);
}

TEST(Quad, AllActivePlainAdamDecreases) {
  QuadraticProblem p = QuadraticProblem::make_default(16, 4, 0.0, 3);
  for (std::size_t i = 0; i < 16; ++i) p.x[i] = 1.0;  // f = 1/2 |w - y|^2
  const FreezeSchedule s = FreezeSchedule::fixed(4, 4, 1, 1000, 0);
  const QuadResult r = quad_check(p, s, {10, 100, 1000}, {.lr = 0.1});
  EXPECT_GT(r.rows[0].avg_suboptimality, r.rows[1].avg_suboptimality);
  EXPECT_GT(r.rows[1].avg_suboptimality, r.rows[2].avg_suboptimality);
}

TEST(Quad, OptimumIsFixedPoint) {
  // With x = 1 and S = 0 the minimizer is y itself, so the gradient there is
  // exactly zero. Any rounding residue would be amplified by Adam.
  QuadraticProblem p = QuadraticProblem::make_default(8, 2, 0.0, 5);
  std::fill(p.x.begin(), p.x.end(), 1.0);
  p.w0 = p.minimizer();
  const QuadResult r = quad_check(p, FreezeSchedule::fixed(2, 1, 3, 100, 0), {1, 10, 100}, {.lr = 0.1});
  for (const auto& row : r.rows) EXPECT_LT(std::abs(row.avg_suboptimality), 1e-12);
}

TEST(Quad, NegativeRegularizerRejected) {
  QuadraticProblem p = QuadraticProblem::make_default(8, 2, 0.1, 5);
  p.s[3] = -0.5;
  EXPECT_THROW(quad_check(p, FreezeSchedule::fixed(2, 1, 1, 10, 0), {10}, {}), ConfigError);
  json j = to_json(QuadConfig{});
  j["quad"]["regularization"] = -1.0;
  EXPECT_THROW(quad_config_from_json(j), ConfigError);
}

TEST(Quad, CsvTable) {
  QuadResult r;
  r.rows.push_back({100, 0.5, 5.0});
  EXPECT_EQ(quad_table_csv(r), "T,avg_suboptimality,scaled_by_sqrt_T\n100,0.5,5\n");
}
