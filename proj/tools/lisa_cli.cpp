// lisa_cli: config-driven training runs, sweeps, the convex check,
// plot-data merging and memory estimates.
//
// Exit codes: 0 success, 2 config or data error, 3 divergence, 4 I/O error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lisa/lisa.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

int report(const lisa::RunLog& log, const std::string& where) {
  std::cout << where << ": " << lisa::to_string(log.status) << ", " << log.steps.size() << " steps";
  if (!log.steps.empty()) std::cout << ", final loss " << lisa::format_double(log.final_loss());
  std::cout << "\n";
  if (log.status == lisa::RunStatus::diverged) {
    std::cerr << "diverged: " << log.message << "\n";
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_run(const std::string& path) {
  const lisa::RunConfig c = lisa::load_run_config(path);
  const auto dir = lisa::resolve_output(c.output);
  return report(lisa::run_config(c, dir), dir.string());
}

int cmd_sweep(const std::string& path, const std::string& axis_name, const std::vector<std::string>& values) {
  const lisa::RunConfig base = lisa::load_run_config(path);
  const lisa::SweepAxis axis = lisa::parse_axis(axis_name);
  std::vector<std::uint64_t> parsed;
  for (const auto& v : values) {
    for (const auto& piece : lisa::split(v, ',')) {
      if (piece.empty()) continue;
      parsed.push_back(lisa::parse_size(piece, "--values"));
    }
  }
  const auto rows = lisa::sweep(base, axis, parsed);
  std::cout << lisa::sweep_summary_csv(rows);
  bool diverged = false;
  for (const auto& r : rows) diverged = diverged || r.status == "diverged";
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_quad(const std::string& path) {
  const lisa::QuadResult r = lisa::quad_check_file(path);
  std::cout << lisa::quad_table_csv(r);
  return kExitOk;
}

int cmd_plot(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  const lisa::PlotData d = lisa::plot_data(paths, lisa::resolve_output(out));
  for (const auto& w : d.warnings) std::cerr << "warning: " << w << "\n";
  return kExitOk;
}

struct EstimateArgs {
  std::string preset;
  std::string method;
  std::size_t rank = 0;
  std::size_t gamma = 0;
  bool lora_head = false;
  std::string policy = "discard";
  std::size_t bytes = 2;
  std::size_t batch = 1;
  std::size_t seq = 0;
  std::size_t vocab = 16;
};

int cmd_estimate(const EstimateArgs& a) {
  const lisa::ArchSpec spec = a.preset == "desk"
                                  ? lisa::ArchSpec::from_model(lisa::ModelConfig::desk(a.vocab, a.seq ? a.seq : 16))
                                  : lisa::arch_preset(a.preset);
  lisa::MemoryMethod m;
  if (a.method == "full") {
    m = lisa::MemoryMethod::full();
  } else if (a.method == "lora") {
    if (a.rank == 0) throw lisa::ConfigError("--method lora needs --rank");
    m = lisa::MemoryMethod::lora(a.rank, a.lora_head);
  } else if (a.method == "lisa") {
    if (a.gamma == 0) throw lisa::ConfigError("--method lisa needs --gamma");
    m = lisa::MemoryMethod::lisa(a.gamma, lisa::parse_enum<lisa::MomentPolicy>(
                                              a.policy, "--moment-policy",
                                              {{"discard", lisa::MomentPolicy::discard},
                                               {"retain", lisa::MomentPolicy::retain}}));
  } else {
    throw lisa::ConfigError("--method: expected full, lora or lisa, got '" + a.method + "'");
  }
  const std::size_t seq = a.seq ? a.seq : spec.max_seq;
  const lisa::MemoryEstimate e = lisa::estimate_memory(spec, m, a.bytes, a.batch, seq);
  nlohmann::json j = lisa::memory_to_json(e);
  j["preset"] = spec.name;
  j["method"] = a.method;
  j["bytes_per_param"] = a.bytes;
  j["batch"] = a.batch;
  j["seq"] = seq;
  j["total_gib"] = static_cast<double>(e.total) / (1024.0 * 1024.0 * 1024.0);
  j["activation_model"] = lisa::kActivationModel;
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LISA desk-scale training harness (" + std::string(lisa::kVersion) + ")"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(lisa::kVersion));

  std::string config;
  auto* run = app.add_subcommand("run", "Train from a config file");
  run->add_option("config", config, "Run config (JSON)")->required();

  std::string axis;
  std::vector<std::string> values;
  auto* sweep = app.add_subcommand("sweep", "Run one config per axis value and write summary.csv");
  sweep->add_option("config", config, "Base run config (JSON)")->required();
  sweep->add_option("--axis", axis, "gamma, K, seed or rank")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();

  auto* quad = app.add_subcommand("quad-check", "Convex convergence check");
  quad->add_option("config", config, "Quad config (JSON)")->required();

  std::vector<std::string> dirs;
  std::string out;
  auto* plot = app.add_subcommand("plot-data", "Merge run directories into plot-ready CSVs");
  plot->add_option("dirs", dirs, "Run directories")->required();
  plot->add_option("--out", out, "Output directory")->required();

  EstimateArgs est;
  auto* estimate = app.add_subcommand("estimate-memory", "Analytic training memory estimate");
  estimate->add_option("--preset", est.preset, "desk, gpt2-small, tinyllama, phi-2, mistral-7b, llama-2-7b, llama-2-70b")
      ->required();
  estimate->add_option("--method", est.method, "full, lora or lisa")->required();
  estimate->add_option("--rank", est.rank, "LoRA rank");
  estimate->add_option("--gamma", est.gamma, "LISA sampled middle layers");
  estimate->add_flag("--lora-head", est.lora_head, "Adapt the LM head as well");
  estimate->add_option("--moment-policy", est.policy, "discard or retain");
  estimate->add_option("--bytes", est.bytes, "Bytes per parameter: 2, 4 or 8")->capture_default_str();
  estimate->add_option("--batch", est.batch, "Batch size")->capture_default_str();
  estimate->add_option("--seq", est.seq, "Sequence length (default: the preset's context)");
  estimate->add_option("--vocab", est.vocab, "Vocabulary for the desk preset")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config);
    if (*sweep) return cmd_sweep(config, axis, values);
    if (*quad) return cmd_quad(config);
    if (*plot) return cmd_plot(dirs, out);
    if (*estimate) return cmd_estimate(est);
  } catch (const lisa::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const lisa::NumericError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
