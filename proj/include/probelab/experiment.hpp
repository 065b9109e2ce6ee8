#pragma once

// Experiment configuration, the flat CSV results schema, single-run
// execution and the sweep grids.

#include <charconv>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "probelab/datagen.hpp"
#include "probelab/errors.hpp"
#include "probelab/models.hpp"
#include "probelab/random.hpp"
#include "probelab/training.hpp"

namespace probelab {

inline constexpr int kCsvSchemaVersion = 1;

inline const std::vector<std::size_t>& repr_size_grid() {
  static const std::vector<std::size_t> g = {10, 50, 100, 200, 300, 600};
  return g;
}
inline const std::vector<std::size_t>& probe_width_grid() {
  static const std::vector<std::size_t> g = {10, 50, 100, 200, 1000};
  return g;
}
inline const std::vector<std::size_t>& probe_layer_grid() {
  static const std::vector<std::size_t> g = {1, 2};
  return g;
}
inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> g = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0};
  return g;
}
inline const std::vector<std::size_t>& adversary_width_grid() {
  static const std::vector<std::size_t> g = {100, 200, 1000, 5000, 10000};
  return g;
}
inline const std::vector<double>& adversary_lambda_grid() {
  static const std::vector<double> g = {0.0, 1.0};
  return g;
}

/// The attacker is fixed across all experiments.
inline constexpr MlpConfig kAttackerConfig{1, 200};

struct ExperimentConfig {
  Regime regime = Regime::kNoise;
  EncoderConfig encoder;
  MlpConfig probe;
  bool adversarial = false;
  double lambda = 0.0;
  MlpConfig adversary;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::string output;  // results CSV; not part of the experiment identity

  void validate() const {
    if (encoder.d_emb == 0) throw ConfigError("d_emb must be positive");
    if (encoder.kind == EncoderKind::kBiLstm && encoder.hidden == 0) {
      throw ConfigError("hidden must be positive");
    }
    for (const MlpConfig* m : {&probe, &adversary}) {
      if (m->layers != 1 && m->layers != 2) throw ConfigError("MLP layers must be 1 or 2");
      if (m->width == 0) throw ConfigError("MLP width must be positive");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ConfigError("lambda must be finite and non-negative");
    }
    train.validate();
  }

  /// The training configuration with this experiment's seed and lambda.
  TrainConfig effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.lambda = adversarial ? lambda : 0.0;
    return t;
  }

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    const auto key = [](const ExperimentConfig& c) {
      return std::tuple(c.regime, c.encoder.kind, c.encoder.pooling, c.encoder.hidden,
                        c.encoder.d_emb, c.probe.layers, c.probe.width, c.adversarial, c.lambda,
                        c.adversary.layers, c.adversary.width, c.train.max_epochs,
                        c.train.patience, c.train.batch_size, c.train.learning_rate, c.seed);
    };
    return key(a) == key(b);
  }
};

struct ResultsRecord {
  ExperimentConfig config;
  MetricsRecord metrics;
  double seconds = 0.0;
  std::string status = "ok";
  std::string data_digest;
  std::string encoder_digest;
};

// ---------------------------------------------------------------------------
// CSV

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "schema_version", "regime",        "encoder",       "pooling",      "hidden",
      "d_emb",          "probe_layers",  "probe_width",   "adversarial",  "lambda",
      "adv_layers",     "adv_width",     "seed",          "max_epochs",   "patience",
      "batch_size",     "learning_rate", "epochs_run",    "task_dev_acc", "probe_acc",
      "adversary_acc",  "attacker_acc",  "majority_task", "majority_probe", "seconds",
      "status"};
  return cols;
}

inline std::string csv_header() {
  std::string out;
  for (const auto& c : csv_columns()) {
    if (!out.empty()) out += ',';
    out += c;
  }
  return out;
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

/// Status text safe to embed in one CSV field.
inline std::string sanitize_status(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ';';
  }
  return s;
}

inline std::string format_csv_row(const ResultsRecord& r) {
  const ExperimentConfig& c = r.config;
  const MetricsRecord& m = r.metrics;
  char secs[32];
  std::snprintf(secs, sizeof(secs), "%.3f", r.seconds);
  const std::vector<std::string> fields = {
      std::to_string(kCsvSchemaVersion),
      std::string(regime_name(c.regime)),
      std::string(encoder_name(c.encoder.kind)),
      std::string(pooling_name(c.encoder.pooling)),
      std::to_string(c.encoder.hidden),
      std::to_string(c.encoder.d_emb),
      std::to_string(c.probe.layers),
      std::to_string(c.probe.width),
      c.adversarial ? "1" : "0",
      format_double(c.lambda),
      std::to_string(c.adversary.layers),
      std::to_string(c.adversary.width),
      std::to_string(c.seed),
      std::to_string(c.train.max_epochs),
      std::to_string(c.train.patience),
      std::to_string(c.train.batch_size),
      format_double(c.train.learning_rate),
      std::to_string(m.epochs_run),
      format_optional(m.task_dev_acc),
      format_optional(m.probe_acc),
      format_optional(m.adversary_acc),
      format_optional(m.attacker_acc),
      format_optional(m.majority_task),
      format_optional(m.majority_probe),
      secs,
      sanitize_status(r.status)};
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += fields[i];
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& s, const char* column) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError(std::string("column ") + column + ": cannot parse '" + s + "'");
  }
  return v;
}

inline std::optional<double> parse_optional(const std::string& s, const char* column) {
  if (s.empty()) return std::nullopt;
  return parse_number<double>(s, column);
}

}  // namespace detail

/// Parses one data row of the results CSV; throws FormatError when malformed.
inline ResultsRecord parse_csv_row(const std::string& line) {
  if (!line.empty() && line.back() == '\r') return parse_csv_row(line.substr(0, line.size() - 1));
  const auto f = detail::split_commas(line);
  if (f.size() != csv_columns().size()) {
    throw FormatError("expected " + std::to_string(csv_columns().size()) + " fields, got " +
                      std::to_string(f.size()));
  }
  if (detail::parse_number<int>(f[0], "schema_version") != kCsvSchemaVersion) {
    throw FormatError("unsupported schema version " + f[0]);
  }
  ResultsRecord r;
  ExperimentConfig& c = r.config;
  try {
    c.regime = parse_regime(f[1]);
    c.encoder.kind = parse_encoder(f[2]);
    c.encoder.pooling = parse_pooling(f[3]);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  c.encoder.hidden = detail::parse_number<std::size_t>(f[4], "hidden");
  c.encoder.d_emb = detail::parse_number<std::size_t>(f[5], "d_emb");
  c.probe.layers = detail::parse_number<std::size_t>(f[6], "probe_layers");
  c.probe.width = detail::parse_number<std::size_t>(f[7], "probe_width");
  if (f[8] != "0" && f[8] != "1") throw FormatError("column adversarial: expected 0 or 1");
  c.adversarial = f[8] == "1";
  c.lambda = detail::parse_number<double>(f[9], "lambda");
  c.adversary.layers = detail::parse_number<std::size_t>(f[10], "adv_layers");
  c.adversary.width = detail::parse_number<std::size_t>(f[11], "adv_width");
  c.seed = detail::parse_number<std::uint64_t>(f[12], "seed");
  c.train.max_epochs = detail::parse_number<std::size_t>(f[13], "max_epochs");
  c.train.patience = detail::parse_number<std::size_t>(f[14], "patience");
  c.train.batch_size = detail::parse_number<std::size_t>(f[15], "batch_size");
  c.train.learning_rate = detail::parse_number<double>(f[16], "learning_rate");
  MetricsRecord& m = r.metrics;
  m.epochs_run = detail::parse_number<std::size_t>(f[17], "epochs_run");
  m.task_dev_acc = detail::parse_optional(f[18], "task_dev_acc");
  m.probe_acc = detail::parse_optional(f[19], "probe_acc");
  m.adversary_acc = detail::parse_optional(f[20], "adversary_acc");
  m.attacker_acc = detail::parse_optional(f[21], "attacker_acc");
  m.majority_task = detail::parse_optional(f[22], "majority_task");
  m.majority_probe = detail::parse_optional(f[23], "majority_probe");
  r.seconds = detail::parse_number<double>(f[24], "seconds");
  r.status = f[25];
  return r;
}

// ---------------------------------------------------------------------------
// Running experiments

/// Encoder and pair head after task (or adversarial) training.
struct TrainedEncoder {
  ExperimentConfig config;
  Encoder encoder;
  PairHead head;
  MetricsRecord metrics;
  std::string status = "ok";
  std::optional<ProbeFeatures> features;  // filled by the first probing stage
};

namespace detail {

inline std::string failure(const char* stage, const std::exception& e) {
  return std::string("failed:") + stage + ": " + e.what();
}

/// Probe-set representations of the trained encoder, computed on first use.
/// Throws InvariantViolation if the encoder changed since they were computed.
inline const ProbeFeatures& probe_features(TrainedEncoder& trained, const ProbeDataset& probe) {
  if (!trained.features) {
    trained.features = encode_probe_features(trained.encoder, probe);
  } else if (parameter_digest(trained.encoder.parameters()) != trained.features->encoder_digest) {
    throw InvariantViolation("encoder parameters changed between probing stages");
  }
  return *trained.features;
}

}  // namespace detail

/// Stage 1: majority baselines, then task or adversarial training.
inline TrainedEncoder train_encoder_stage(const ExperimentConfig& cfg, const DatasetSplits& task,
                                          const ProbeDataset& probe) {
  TrainedEncoder out;
  out.config = cfg;
  try {
    cfg.validate();
    out.metrics.majority_task = majority_baseline(
        std::span<const ExamplePair>(task.dev), [](const ExamplePair& ex) { return ex.entailed; });
    out.metrics.majority_probe =
        majority_baseline(std::span<const ProbeExample>(probe.test),
                          [](const ProbeExample& ex) { return ex.has_c; });
  } catch (const std::exception& e) {
    out.status = detail::failure("config", e);
    return out;
  }
  try {
    Rng enc_rng(derive_seed(cfg.seed, "init/encoder"));
    Rng head_rng(derive_seed(cfg.seed, "init/head"));
    out.encoder = Encoder(cfg.encoder, enc_rng);
    out.head = PairHead(out.encoder.output_dim(), head_rng);
    const TrainConfig tc = cfg.effective_train();
    TaskResult r;
    if (cfg.adversarial) {
      Rng adv_rng(derive_seed(cfg.seed, "init/adversary"));
      MlpHead adversary(out.encoder.output_dim(), cfg.adversary, adv_rng, "adversary");
      r = train_adversarial(out.encoder, out.head, adversary, task, tc);
    } else {
      r = train_task(out.encoder, out.head, task, tc);
    }
    out.metrics.task_dev_acc = r.metrics.task_dev_acc;
    out.metrics.adversary_acc = r.metrics.adversary_acc;
    out.metrics.epochs_run = r.metrics.epochs_run;
  } catch (const std::exception& e) {
    out.status = detail::failure("task", e);
  }
  return out;
}

/// Stage 2: probe with the configured head on the frozen encoder.
inline std::optional<double> probe_stage(TrainedEncoder& trained, const MlpConfig& probe_cfg,
                                         const ProbeDataset& probe, std::string& status) {
  if (trained.status != "ok") {
    status = trained.status;
    return std::nullopt;
  }
  try {
    Rng rng(derive_seed(trained.config.seed, "init/probe"));
    MlpHead head(trained.encoder.output_dim(), probe_cfg, rng, "probe");
    const ProbeFeatures& f = detail::probe_features(trained, probe);
    return train_head_on_features(head, f, trained.config.effective_train(), "probe").test_acc;
  } catch (const std::exception& e) {
    status = detail::failure("probe", e);
    return std::nullopt;
  }
}

/// Stage 3: the fixed external attacker on the frozen encoder.
inline std::optional<double> attacker_stage(TrainedEncoder& trained, const ProbeDataset& probe,
                                            std::string& status) {
  if (trained.status != "ok") {
    status = trained.status;
    return std::nullopt;
  }
  try {
    Rng rng(derive_seed(trained.config.seed, "init/attacker"));
    MlpHead head(trained.encoder.output_dim(), kAttackerConfig, rng, "attacker");
    const ProbeFeatures& f = detail::probe_features(trained, probe);
    return train_head_on_features(head, f, trained.config.effective_train(), "attacker")
        .test_acc;
  } catch (const std::exception& e) {
    status = detail::failure("attacker", e);
    return std::nullopt;
  }
}

/// Encoder parameters plus the manifest needed to rebuild the encoder.
inline Checkpoint encoder_checkpoint(const TrainedEncoder& trained) {
  const ExperimentConfig& c = trained.config;
  return make_checkpoint({{"kind", std::string(encoder_name(c.encoder.kind))},
                          {"pooling", std::string(pooling_name(c.encoder.pooling))},
                          {"hidden", std::to_string(c.encoder.hidden)},
                          {"d_emb", std::to_string(c.encoder.d_emb)},
                          {"seed", std::to_string(c.seed)}},
                         trained.encoder.parameters());
}

/// Full pipeline for one configuration. Stage failures are reported in the
/// status field; metrics of stages that did not run stay empty.
/// `on_trained` sees the encoder after task training, before probing.
inline ResultsRecord run_experiment(
    const ExperimentConfig& cfg, const DatasetSplits& task, const ProbeDataset& probe,
    const std::function<void(const TrainedEncoder&)>& on_trained = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainedEncoder trained = train_encoder_stage(cfg, task, probe);
  if (on_trained && trained.status == "ok") on_trained(trained);
  ResultsRecord r;
  r.config = cfg;
  r.metrics = trained.metrics;
  r.status = trained.status;
  std::string status = "ok";
  r.metrics.attacker_acc = attacker_stage(trained, probe, status);
  if (status == "ok") r.metrics.probe_acc = probe_stage(trained, cfg.probe, probe, status);
  if (r.status == "ok") r.status = status;
  if (trained.status == "ok") r.encoder_digest = parameter_digest(trained.encoder.parameters());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepKind { kReprSize, kProbeCapacity, kLambda, kAdversaryCapacity };

inline SweepKind parse_sweep_kind(std::string_view s) {
  if (s == "repr_size") return SweepKind::kReprSize;
  if (s == "probe_capacity") return SweepKind::kProbeCapacity;
  if (s == "lambda") return SweepKind::kLambda;
  if (s == "adversary_capacity") return SweepKind::kAdversaryCapacity;
  throw ConfigError("unknown sweep kind '" + std::string(s) +
                    "' (expected repr_size, probe_capacity, lambda or adversary_capacity)");
}

/// All cells of a sweep: seeds x regimes x grid, in that nesting order.
inline std::vector<ExperimentConfig> sweep_grid(SweepKind kind, const ExperimentConfig& base,
                                                std::size_t num_seeds = 1) {
  if (num_seeds == 0) throw ConfigError("a sweep needs at least one seed");
  std::vector<ExperimentConfig> cells;
  for (std::size_t s = 0; s < num_seeds; ++s) {
    for (Regime regime : kAllRegimes) {
      ExperimentConfig c = base;
      c.regime = regime;
      c.seed = base.seed + s;
      switch (kind) {
        case SweepKind::kReprSize:
          for (std::size_t h : repr_size_grid()) {
            c.encoder.hidden = h;
            cells.push_back(c);
          }
          break;
        case SweepKind::kProbeCapacity:
          for (std::size_t layers : probe_layer_grid()) {
            for (std::size_t w : probe_width_grid()) {
              c.probe = {layers, w};
              cells.push_back(c);
            }
          }
          break;
        case SweepKind::kLambda:
          c.adversarial = true;
          for (double l : lambda_grid()) {
            c.lambda = l;
            cells.push_back(c);
          }
          break;
        case SweepKind::kAdversaryCapacity:
          c.adversarial = true;
          for (double l : adversary_lambda_grid()) {
            for (std::size_t layers : probe_layer_grid()) {
              for (std::size_t w : adversary_width_grid()) {
                c.lambda = l;
                c.adversary = {layers, w};
                cells.push_back(c);
              }
            }
          }
          break;
      }
    }
  }
  return cells;
}

/// Datasets for one seed, shared read-only by every cell using that seed.
using CorpusProvider = std::function<std::shared_ptr<const Corpus>(std::uint64_t seed)>;

inline CorpusProvider default_corpus_provider() {
  auto cache = std::make_shared<std::map<std::uint64_t, std::shared_ptr<const Corpus>>>();
  auto mu = std::make_shared<std::mutex>();
  return [cache, mu](std::uint64_t seed) {
    std::lock_guard lock(*mu);
    auto it = cache->find(seed);
    if (it == cache->end()) {
      it = cache->emplace(seed, std::make_shared<const Corpus>(build_corpus(seed))).first;
    }
    return it->second;
  };
}

/// Runs every cell. Cells that differ only in the probe head share one
/// trained encoder and attacker. Rows are delivered to `sink` in cell order
/// from a single thread at a time, whatever the worker count.
inline std::vector<ResultsRecord> run_sweep(
    const std::vector<ExperimentConfig>& cells, const CorpusProvider& corpora,
    std::size_t workers, const std::function<void(const ResultsRecord&)>& sink = {}) {
  // Group by everything except the probe head.
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    bool placed = false;
    for (auto& g : groups) {
      ExperimentConfig a = cells[g.front()];
      ExperimentConfig b = cells[i];
      a.probe = b.probe;
      if (a == b) {
        g.push_back(i);
        placed = true;
        break;
      }
    }
    if (!placed) groups.push_back({i});
  }

  std::vector<std::optional<ResultsRecord>> results(cells.size());
  std::mutex mu;
  std::size_t next_group = 0;
  std::size_t flushed = 0;

  const auto run_group = [&](const std::vector<std::size_t>& g) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig& first = cells[g.front()];
    std::vector<ResultsRecord> rows;
    std::shared_ptr<const Corpus> corpus;
    std::string data_status = "ok";
    try {
      corpus = corpora(first.seed);
    } catch (const std::exception& e) {
      data_status = detail::failure("data", e);
    }
    if (!corpus) {
      for (std::size_t i : g) {
        ResultsRecord r;
        r.config = cells[i];
        r.status = data_status;
        rows.push_back(std::move(r));
      }
    } else {
      const DatasetSplits& task = corpus->task(first.regime);
      TrainedEncoder trained = train_encoder_stage(first, task, corpus->probe);
      std::string attack_status = "ok";
      const auto attacker = attacker_stage(trained, corpus->probe, attack_status);
      const double shared =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (std::size_t i : g) {
        const auto c0 = std::chrono::steady_clock::now();
        ResultsRecord r;
        r.config = cells[i];
        r.metrics = trained.metrics;
        r.metrics.attacker_acc = attacker;
        r.status = trained.status == "ok" ? attack_status : trained.status;
        if (r.status == "ok") {
          std::string probe_status = "ok";
          r.metrics.probe_acc = probe_stage(trained, cells[i].probe, corpus->probe, probe_status);
          r.status = probe_status;
        }
        if (trained.status == "ok") {
          r.encoder_digest = parameter_digest(trained.encoder.parameters());
        }
        r.seconds = shared + std::chrono::duration<double>(std::chrono::steady_clock::now() - c0)
                                 .count();
        rows.push_back(std::move(r));
      }
    }
    std::lock_guard lock(mu);
    for (std::size_t k = 0; k < g.size(); ++k) results[g[k]] = std::move(rows[k]);
    while (flushed < results.size() && results[flushed]) {
      if (sink) sink(*results[flushed]);
      ++flushed;
    }
  };

  const auto worker = [&]() {
    while (true) {
      std::size_t gi;
      {
        std::lock_guard lock(mu);
        if (next_group >= groups.size()) return;
        gi = next_group++;
      }
      run_group(groups[gi]);
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, groups.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  std::vector<ResultsRecord> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

}  // namespace probelab
