// probelab: dataset generation, single experiments, sweeps and reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "probelab/checkpoint.hpp"
#include "probelab/dataset_io.hpp"
#include "probelab/experiment.hpp"
#include "probelab/report.hpp"
#include "probelab/runtime.hpp"

namespace fs = std::filesystem;
using namespace probelab;

namespace {

/// Text-valued options are parsed after CLI11 is done so that all
/// validation errors share one path.
struct ConfigFlags {
  std::string regime = "NOISE";
  std::string encoder = "bilstm";
  std::string pooling = "last";
  bool adversarial = false;
};

void add_config_flags(CLI::App& app, ExperimentConfig& cfg, ConfigFlags& flags) {
  app.add_option("--regime", flags.regime, "NOISE, UNCORRELATED, PARTIAL or FULL");
  app.add_option("--encoder", flags.encoder, "bilstm or cbow");
  app.add_option("--pooling", flags.pooling, "last, avg or max (BiLSTM only)");
  app.add_option("--hidden", cfg.encoder.hidden, "LSTM hidden size per direction");
  app.add_option("--d_emb", cfg.encoder.d_emb, "symbol embedding size");
  app.add_option("--probe_layers", cfg.probe.layers, "probe hidden layers (1 or 2)");
  app.add_option("--probe_width", cfg.probe.width, "probe hidden width");
  app.add_flag("--adversarial", flags.adversarial, "train with the gradient-reversal adversary");
  app.add_option("--lambda", cfg.lambda, "gradient reversal scale");
  app.add_option("--adv_layers", cfg.adversary.layers, "adversary hidden layers (1 or 2)");
  app.add_option("--adv_width", cfg.adversary.width, "adversary hidden width");
  app.add_option("--seed", cfg.seed, "master seed");
  app.add_option("--max_epochs", cfg.train.max_epochs);
  app.add_option("--patience", cfg.train.patience);
  app.add_option("--batch_size", cfg.train.batch_size);
  app.add_option("--learning_rate", cfg.train.learning_rate);
  app.add_option("--output", cfg.output, "results CSV (rows are appended)");
  app.set_config("--config", "", "key=value file with the same field names");
}

void resolve_flags(ExperimentConfig& cfg, const ConfigFlags& flags) {
  cfg.regime = parse_regime(flags.regime);
  cfg.encoder.kind = parse_encoder(flags.encoder);
  cfg.encoder.pooling = parse_pooling(flags.pooling);
  cfg.adversarial = flags.adversarial;
  cfg.validate();
}

/// Appends rows to a results CSV, writing the header for a new file and
/// refusing to mix schema versions.
class CsvAppender {
 public:
  explicit CsvAppender(const std::string& path) : path_(path) {
    if (path.empty()) return;
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    if (!fresh) {
      std::ifstream in(path);
      std::string header;
      std::getline(in, header);
      if (!header.empty() && header.back() == '\r') header.pop_back();
      if (header != csv_header()) {
        throw FormatError("existing CSV '" + path + "' has a different schema");
      }
    }
    out_.open(path, std::ios::app | std::ios::binary);
    if (!out_) throw std::runtime_error("cannot open '" + path + "' for appending");
    if (fresh) out_ << csv_header() << "\n";
    out_.flush();
  }

  void append(const ResultsRecord& r) {
    const std::string row = format_csv_row(r);
    if (out_.is_open()) {
      out_ << row << "\n";
      out_.flush();
    } else {
      std::cout << row << "\n";
    }
  }

  bool to_stdout() const { return path_.empty(); }

 private:
  std::string path_;
  std::ofstream out_;
};

int error_line(const std::string& type, const std::string& message, int code) {
  nlohmann::ordered_json j;
  j["error"] = type;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"probelab: probing classifiers on a synthetic entailment task"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate one regime's datasets and the probe data");
  std::string gen_regime = "NOISE";
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--regime", gen_regime)->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out, "output directory")->required();

  // run
  auto* run = app.add_subcommand("run", "train, probe and attack one configuration");
  ExperimentConfig run_cfg;
  ConfigFlags run_flags;
  std::string run_data_dir, run_checkpoint;
  add_config_flags(*run, run_cfg, run_flags);
  run->add_option("--data-dir", run_data_dir, "dataset directory written by 'gen'");
  run->add_option("--checkpoint", run_checkpoint, "write the trained encoder here");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run a grid across all four regimes");
  ExperimentConfig sweep_cfg;
  ConfigFlags sweep_flags;
  std::string sweep_kind;
  std::size_t sweep_seeds = 1, sweep_workers = 1;
  add_config_flags(*sweep, sweep_cfg, sweep_flags);
  sweep->add_option("--kind", sweep_kind, "repr_size, probe_capacity, lambda or adversary_capacity")
      ->required();
  sweep->add_option("--seeds", sweep_seeds, "number of consecutive seeds from --seed");
  sweep->add_option("--workers", sweep_workers, "concurrent encoder trainings");

  // report
  auto* report = app.add_subcommand("report", "summarize a results CSV");
  std::string report_csv, report_panels;
  report->add_option("csv", report_csv)->required();
  report->add_option("--panels", report_panels, "directory for long-format panel files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return error_line("usage", e.what(), 2);
  }

  try {
    if (*gen) {
      const Regime regime = parse_regime(gen_regime);
      const Corpus corpus = build_corpus(gen_seed);
      const std::string digest =
          write_dataset_dir(gen_out, corpus.task(regime), corpus.probe, gen_seed);
      std::cout << "wrote " << gen_out << " digest " << digest << "\n";
      return 0;
    }

    if (*run) {
      resolve_flags(run_cfg, run_flags);
      DatasetSplits task;
      ProbeDataset probe;
      if (!run_data_dir.empty()) {
        LoadedDataset data = read_dataset_dir(run_data_dir);
        if (data.task.regime != run_cfg.regime) {
          throw ConfigError("dataset directory holds " + std::string(regime_name(data.task.regime)) +
                            ", config asks for " + std::string(regime_name(run_cfg.regime)));
        }
        task = std::move(data.task);
        probe = std::move(data.probe);
      } else {
        Corpus corpus = build_corpus(run_cfg.seed);
        task = corpus.task(run_cfg.regime);
        probe = std::move(corpus.probe);
      }
      CsvAppender csv(run_cfg.output);
      const ResultsRecord r = run_experiment(run_cfg, task, probe, [&](const TrainedEncoder& t) {
        if (!run_checkpoint.empty()) save_checkpoint(run_checkpoint, encoder_checkpoint(t));
      });
      csv.append(r);
      if (!csv.to_stdout()) std::cout << format_csv_row(r) << "\n";
      return r.status == "ok" ? 0 : error_line("stage", r.status, 1);
    }

    if (*sweep) {
      resolve_flags(sweep_cfg, sweep_flags);
      const auto cells = sweep_grid(parse_sweep_kind(sweep_kind), sweep_cfg, sweep_seeds);
      CsvAppender csv(sweep_cfg.output);
      std::size_t failed = 0;
      run_sweep(cells, default_corpus_provider(), sweep_workers, [&](const ResultsRecord& r) {
        csv.append(r);
        if (r.status != "ok") ++failed;
      });
      if (failed) std::cerr << failed << " of " << cells.size() << " cells failed\n";
      return 0;
    }

    if (*report) {
      const ParsedResults parsed = parse_results_csv(read_file(report_csv));
      for (const MalformedRow& m : parsed.malformed) {
        std::cerr << "skipped line " << m.line << ": " << m.reason << "\n";
      }
      if (!parsed.malformed.empty()) {
        std::cerr << parsed.malformed.size() << " malformed rows skipped\n";
      }
      if (parsed.rows.empty()) {
        std::cerr << "warning: no result rows in " << report_csv << "\n";
        return 0;
      }
      std::cout << render_summary(summary_grids(parsed.rows));
      if (!report_panels.empty()) {
        fs::create_directories(report_panels);
        for (const Panel& p : {repr_size_panel(parsed.rows), probe_capacity_panel(parsed.rows),
                               adversary_capacity_panel(parsed.rows)}) {
          const fs::path file = fs::path(report_panels) / (p.name + ".csv");
          write_file(file, format_panel_csv(p));
          std::cout << "wrote " << file.string() << " (" << p.points.size() << " points)\n";
        }
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    return error_line("config", e.what(), 2);
  } catch (const FormatError& e) {
    return error_line("format", e.what(), 1);
  } catch (const std::exception& e) {
    return error_line("runtime", e.what(), 1);
  }
  return 0;
}
