#pragma once

// Aggregation of results CSV rows into the adversarial summary grid and
// long-format panel tables for plotting.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "probelab/experiment.hpp"

namespace probelab {

struct MalformedRow {
  std::size_t line = 0;  // 1-based line number in the CSV
  std::string reason;
};

struct ParsedResults {
  std::vector<ResultsRecord> rows;
  std::vector<MalformedRow> malformed;
  bool has_header = false;
};

/// Parses a results CSV. Malformed rows are collected, not fatal; a wrong
/// header is fatal.
inline ParsedResults parse_results_csv(const std::string& text) {
  ParsedResults out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!out.has_header) {
      if (line != csv_header()) throw FormatError("results CSV has an unexpected header");
      out.has_header = true;
      continue;
    }
    try {
      out.rows.push_back(parse_csv_row(line));
    } catch (const FormatError& e) {
      out.malformed.push_back({lineno, e.what()});
    }
  }
  return out;
}

/// Running mean of the present values.
struct Mean {
  double sum = 0.0;
  std::size_t count = 0;

  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++count;
    }
  }
  std::optional<double> value() const {
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }
};

/// One cell of the summary grid: mean task dev, adversary and attacker
/// accuracy over all matching rows (typically seeds).
struct GridCell {
  Mean dev, adversary, attacker;
  std::size_t rows = 0;
};

/// Rows of one model variant: encoder, training and adversary settings.
/// Non-adversarial rows use the key "none"; adversarial rows use lambda.
struct SummaryGrid {
  std::string variant;
  std::map<std::pair<int, double>, std::map<Regime, GridCell>> cells;
  Mean majority_task, majority_probe;
};

inline std::string variant_label(const ExperimentConfig& c) {
  std::string s = std::string(encoder_name(c.encoder.kind));
  if (c.encoder.kind == EncoderKind::kBiLstm) {
    s += "-" + std::string(pooling_name(c.encoder.pooling)) + " h" +
         std::to_string(c.encoder.hidden);
  }
  s += " emb" + std::to_string(c.encoder.d_emb);
  s += " epochs" + std::to_string(c.train.max_epochs) + " patience" +
       std::to_string(c.train.patience) + " batch" + std::to_string(c.train.batch_size) +
       " lr" + format_double(c.train.learning_rate);
  return s;
}

inline std::vector<SummaryGrid> summary_grids(const std::vector<ResultsRecord>& rows) {
  std::vector<SummaryGrid> grids;
  std::map<std::string, std::size_t> index;
  for (const ResultsRecord& r : rows) {
    const ExperimentConfig& c = r.config;
    std::string variant = variant_label(c);
    if (c.adversarial) {
      variant += " adversary" + std::to_string(c.adversary.layers) + "x" +
                 std::to_string(c.adversary.width);
    }
    auto [it, inserted] = index.emplace(variant, grids.size());
    if (inserted) grids.push_back(SummaryGrid{variant, {}, {}, {}});
    SummaryGrid& g = grids[it->second];
    GridCell& cell = g.cells[{c.adversarial ? 1 : 0, c.adversarial ? c.lambda : 0.0}][c.regime];
    cell.dev.add(r.metrics.task_dev_acc);
    cell.adversary.add(r.metrics.adversary_acc);
    cell.attacker.add(r.metrics.attacker_acc);
    ++cell.rows;
    g.majority_task.add(r.metrics.majority_task);
    g.majority_probe.add(r.metrics.majority_probe);
  }
  return grids;
}

namespace detail {

inline std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * *v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

}  // namespace detail

/// Plain-text rendering: one block per variant with rows per lambda and
/// Dev / Adv / Attack columns per regime, in percent.
inline std::string render_summary(const std::vector<SummaryGrid>& grids) {
  std::ostringstream out;
  for (const SummaryGrid& g : grids) {
    std::vector<Regime> regimes;
    for (Regime r : kAllRegimes) {
      for (const auto& [key, row] : g.cells) {
        if (row.count(r)) {
          regimes.push_back(r);
          break;
        }
      }
    }
    out << "== " << g.variant << "\n";
    out << detail::pad("lambda", 8);
    for (Regime r : regimes) {
      const std::string name(regime_name(r));
      out << " | " << detail::pad(name + " Dev", 18) << detail::pad("Adv", 8)
          << detail::pad("Attack", 8);
    }
    out << "\n";
    for (const auto& [key, row] : g.cells) {
      out << detail::pad(key.first ? format_double(key.second) : "none", 8);
      for (Regime r : regimes) {
        const auto it = row.find(r);
        if (it == row.end()) {
          out << " | " << detail::pad("", 18) << detail::pad("", 8) << detail::pad("", 8);
          continue;
        }
        const GridCell& c = it->second;
        out << " | " << detail::pad(detail::pct(c.dev.value()), 18)
            << detail::pad(detail::pct(c.adversary.value()), 8)
            << detail::pad(detail::pct(c.attacker.value()), 8);
      }
      out << "\n";
    }
    out << detail::pad("majority", 8) << " | task " << detail::pct(g.majority_task.value())
        << ", probe " << detail::pct(g.majority_probe.value()) << "\n\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Panels

/// Long-format aggregate: one line per (series, x, metric).
struct PanelPoint {
  std::string series;
  double x = 0.0;
  std::string metric;
  double value = 0.0;
  std::size_t count = 0;
};

struct Panel {
  std::string name;
  std::string x_label;
  std::vector<PanelPoint> points;
};

namespace detail {

using PanelKey = std::tuple<std::string, double, std::string>;

inline Panel finish_panel(std::string name, std::string x_label,
                          const std::map<PanelKey, Mean>& acc) {
  Panel p{std::move(name), std::move(x_label), {}};
  for (const auto& [key, mean] : acc) {
    if (!mean.value()) continue;
    p.points.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), *mean.value(),
                        mean.count});
  }
  return p;
}

inline bool is_default_training(const ExperimentConfig& c) {
  const TrainConfig d;
  return c.train.max_epochs == d.max_epochs && c.train.patience == d.patience &&
         c.train.batch_size == d.batch_size && c.train.learning_rate == d.learning_rate &&
         c.encoder.d_emb == kDefaultEmbeddingDim;
}

}  // namespace detail

/// Probe accuracy against representation size: non-adversarial BiLSTM-last
/// rows with the default 1x200 probe. Series are regimes.
inline Panel repr_size_panel(const std::vector<ResultsRecord>& rows) {
  std::map<detail::PanelKey, Mean> acc;
  for (const ResultsRecord& r : rows) {
    const ExperimentConfig& c = r.config;
    if (c.adversarial || c.encoder.kind != EncoderKind::kBiLstm ||
        c.encoder.pooling != PoolMode::kLast || c.probe.layers != 1 || c.probe.width != 200 ||
        !detail::is_default_training(c)) {
      continue;
    }
    const std::string series(regime_name(c.regime));
    const double x = static_cast<double>(c.encoder.hidden);
    acc[{series, x, "probe_acc"}].add(r.metrics.probe_acc);
    acc[{series, x, "task_dev_acc"}].add(r.metrics.task_dev_acc);
  }
  return detail::finish_panel("repr_size", "hidden", acc);
}

/// Probe accuracy against probe width at encoder size 200, one series per
/// regime and probe depth.
inline Panel probe_capacity_panel(const std::vector<ResultsRecord>& rows) {
  std::map<detail::PanelKey, Mean> acc;
  for (const ResultsRecord& r : rows) {
    const ExperimentConfig& c = r.config;
    if (c.adversarial || c.encoder.kind != EncoderKind::kBiLstm ||
        c.encoder.pooling != PoolMode::kLast || c.encoder.hidden != 200 ||
        !detail::is_default_training(c)) {
      continue;
    }
    const std::string series =
        std::string(regime_name(c.regime)) + "/L" + std::to_string(c.probe.layers);
    acc[{series, static_cast<double>(c.probe.width), "probe_acc"}].add(r.metrics.probe_acc);
  }
  return detail::finish_panel("probe_capacity", "probe_width", acc);
}

/// Adversary and attacker accuracy against adversary width, one series per
/// regime, lambda and adversary depth.
inline Panel adversary_capacity_panel(const std::vector<ResultsRecord>& rows) {
  std::map<detail::PanelKey, Mean> acc;
  for (const ResultsRecord& r : rows) {
    const ExperimentConfig& c = r.config;
    if (!c.adversarial || c.encoder.kind != EncoderKind::kBiLstm ||
        c.encoder.pooling != PoolMode::kLast || c.encoder.hidden != 200 ||
        !detail::is_default_training(c)) {
      continue;
    }
    const std::string series = std::string(regime_name(c.regime)) + "/lambda" +
                               format_double(c.lambda) + "/L" +
                               std::to_string(c.adversary.layers);
    const double x = static_cast<double>(c.adversary.width);
    acc[{series, x, "task_dev_acc"}].add(r.metrics.task_dev_acc);
    acc[{series, x, "adversary_acc"}].add(r.metrics.adversary_acc);
    acc[{series, x, "attacker_acc"}].add(r.metrics.attacker_acc);
  }
  return detail::finish_panel("adversary_capacity", "adversary_width", acc);
}

inline std::string format_panel_csv(const Panel& p) {
  std::string out = "panel,series," + p.x_label + ",metric,value,count\n";
  for (const PanelPoint& pt : p.points) {
    out += p.name + "," + pt.series + "," + format_double(pt.x) + "," + pt.metric + "," +
           format_double(pt.value) + "," + std::to_string(pt.count) + "\n";
  }
  return out;
}

}  // namespace probelab
