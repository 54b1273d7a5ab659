#include "ttac/bench.hpp"
#include "ttac/engine.hpp"
#include "ttac/serialization.hpp"
#include "ttac/source_model.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace ttac;

namespace {

Stream load_stream(const fs::path& path) {
  Dataset data = load_dataset(path);
  return {std::move(data.inputs), std::move(data.labels)};
}

ProtocolConfig read_config(const std::string& path, const std::string& protocol,
                           std::optional<std::uint64_t> seed) {
  ProtocolConfig config = path.empty() ? default_protocol_config()
                                       : load_config(path, default_protocol_config());
  if (!protocol.empty()) config.protocol = protocol_from_string(protocol);
  if (seed) config.seed = *seed;
  config.validate();
  return config;
}

void print_summary(const StreamReport& report, const fs::path& out) {
  std::cout << report.method << " " << report.protocol << ": " << report.predictions.size()
            << " predictions";
  if (!report.cumulative_error.empty()) {
    std::cout << ", final error " << 100.0 * report.final_error() << "%";
  }
  std::cout << " -> " << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ttac: streaming test-time adaptation"};
  app.require_subcommand(1);

  // adapt
  auto* adapt = app.add_subcommand("adapt", "Run TTAC++ on a stream under a protocol");
  std::string a_protocol, a_stats, a_model, a_stream, a_config, a_out;
  bool a_infer = false;
  std::optional<std::uint64_t> a_seed;
  adapt->add_option("--protocol", a_protocol, "N-O-SF, N-O-SL, N-M-SF or N-M-SL");
  auto* stats_opt = adapt->add_option("--source-stats", a_stats, "SourceBank JSON");
  auto* infer_opt = adapt->add_flag("--infer-source", a_infer, "Infer the source bank from the classifier");
  stats_opt->excludes(infer_opt);
  adapt->add_option("--model", a_model, "Model checkpoint")->required();
  adapt->add_option("--stream", a_stream, "Target stream CSV")->required();
  adapt->add_option("--config", a_config, "ProtocolConfig JSON");
  adapt->add_option("--out", a_out, "Output directory")->required();
  adapt->add_option("--seed", a_seed, "RNG seed");

  // baseline
  auto* baseline = app.add_subcommand("baseline", "Run a baseline adapter on a stream");
  std::string b_kind = "TEST", b_protocol, b_model, b_stream, b_config, b_out;
  std::optional<std::uint64_t> b_seed;
  baseline->add_option("--kind", b_kind, "TEST, ENTROPY_MIN or ST_ONLY");
  baseline->add_option("--protocol", b_protocol, "Protocol (drives one-pass vs multi-pass)");
  baseline->add_option("--model", b_model, "Model checkpoint")->required();
  baseline->add_option("--stream", b_stream, "Target stream CSV")->required();
  baseline->add_option("--config", b_config, "ProtocolConfig JSON");
  baseline->add_option("--out", b_out, "Output directory")->required();
  baseline->add_option("--seed", b_seed, "RNG seed");

  // infer-source
  auto* infer = app.add_subcommand("infer-source", "Infer a source bank from classifier weights");
  std::string i_model, i_out;
  std::uint64_t i_seed = 0;
  int i_iters = InferConfig{}.max_iterations;
  infer->add_option("--model", i_model, "Model checkpoint")->required();
  infer->add_option("--out", i_out, "SourceBank JSON to write")->required();
  infer->add_option("--seed", i_seed, "Initialization seed");
  infer->add_option("--max-iterations", i_iters, "Iteration cap");

  // train-source
  auto* train = app.add_subcommand("train-source", "Train a source model and estimate its statistics");
  std::string t_train, t_val, t_model, t_stats;
  TrainConfig t_cfg;
  train->add_option("--train", t_train, "Labelled training CSV")->required();
  train->add_option("--val", t_val, "Labelled validation CSV")->required();
  train->add_option("--out-model", t_model, "Model checkpoint to write")->required();
  train->add_option("--out-stats", t_stats, "SourceBank JSON to write")->required();
  train->add_option("--epochs", t_cfg.epochs);
  train->add_option("--lr", t_cfg.lr);
  train->add_option("--seed", t_cfg.seed);

  // bench
  auto* bench = app.add_subcommand("bench", "Synthetic benchmark");
  bench->require_subcommand(1);
  auto* gen = bench->add_subcommand("gen", "Generate a synthetic domain");
  std::string g_spec, g_out;
  gen->add_option("--spec", g_spec, "DomainSpec JSON");
  gen->add_option("--out", g_out, "Output directory")->required();
  auto* run = bench->add_subcommand("run", "Run an experiment grid");
  std::string r_grid, r_out;
  run->add_option("--grid", r_grid, "Grid JSON")->required();
  run->add_option("--out", r_out, "Output directory")->required();
  auto* report = bench->add_subcommand("report", "Summarize a grid run");
  std::string p_in;
  report->add_option("--in", p_in, "Grid output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*adapt) {
      const ProtocolConfig config = read_config(a_config, a_protocol, a_seed);
      const ModelParams model = load_model(a_model);
      SourceBank bank;
      if (a_infer) {
        InferConfig ic;
        ic.seed = config.seed;
        bank = infer_source_bank(model, ic);
      } else if (!a_stats.empty()) {
        bank = load_source_bank(a_stats);
      } else {
        throw std::invalid_argument("adapt: pass --source-stats FILE or --infer-source");
      }
      const StreamReport rep = run_stream(config, bank, model, load_stream(a_stream));
      rep.write(a_out);
      print_summary(rep, a_out);
    } else if (*baseline) {
      const ProtocolConfig config = read_config(b_config, b_protocol, b_seed);
      const StreamReport rep =
          run_baseline(method_from_string(b_kind), config, load_model(b_model), load_stream(b_stream));
      rep.write(b_out);
      print_summary(rep, b_out);
    } else if (*infer) {
      const ModelParams model = load_model(i_model);
      InferConfig ic;
      ic.seed = i_seed;
      ic.max_iterations = i_iters;
      const InferResult result = infer_source_means(model.classifier, ic);
      if (!result.all_consistent()) {
        std::cerr << "warning: source inference not self-consistent; class losses:";
        for (double l : result.class_losses) std::cerr << ' ' << l;
        std::cerr << '\n';
      }
      save_source_bank(build_inferred_bank(result.means, choose_gamma_or(result.means, 1e-6)), i_out);
      std::cout << "inferred " << result.means.size() << " class means in " << result.iterations
                << " iterations -> " << i_out << '\n';
    } else if (*train) {
      const TrainedSource src = train_source(t_cfg, load_dataset(t_train), load_dataset(t_val));
      save_model(src.model, t_model);
      save_source_bank(src.bank, t_stats);
      std::cout << "source val accuracy " << 100.0 * src.val_accuracy << "%\n";
    } else if (*gen) {
      DomainSpec spec;
      if (!g_spec.empty()) {
        std::ifstream in(g_spec);
        if (!in) throw std::runtime_error("cannot open " + g_spec);
        spec = spec_from_json(nlohmann::json::parse(in));
      }
      const DomainData data = generate_domain(spec);
      fs::create_directories(g_out);
      save_dataset(data.source_train, fs::path(g_out) / "source_train.csv");
      save_dataset(data.source_val, fs::path(g_out) / "source_val.csv");
      save_dataset(data.target, fs::path(g_out) / "target.csv");
      std::ofstream(fs::path(g_out) / "spec.json") << spec_to_json(spec).dump(2) << '\n';
      std::cout << "wrote domain to " << g_out << '\n';
    } else if (*run) {
      const auto rows = run_grid(load_grid(r_grid), r_out);
      for (const auto& r : rows) {
        std::cout << r.name << ": ";
        if (r.failure.empty()) {
          std::cout << r.mean_error << " +- " << r.std_error << " %\n";
        } else {
          std::cout << "FAILED (" << r.failure << ")\n";
        }
      }
    } else if (*report) {
      write_report(p_in);
      std::cout << "wrote summary.csv and cumulative_error.dat to " << p_in << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
