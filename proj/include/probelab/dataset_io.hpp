#pragma once

// Text formats for generated data:
//   pair files:  premise \t hypothesis \t entailed \t p_has_c \t h_has_c
//   probe files: string \t has_c
// plus a JSON manifest with regime, seed, sizes and content digests.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "probelab/datagen.hpp"
#include "probelab/digest.hpp"
#include "probelab/errors.hpp"

namespace probelab {

inline constexpr int kDatasetFormatVersion = 1;

inline std::string format_pairs(const std::vector<ExamplePair>& pairs) {
  std::string out;
  out.reserve(pairs.size() * 40);
  for (const ExamplePair& ex : pairs) {
    out += ex.premise.str();
    out += '\t';
    out += ex.hypothesis.str();
    out += ex.entailed ? "\t1" : "\t0";
    out += ex.premise_has_c ? "\t1" : "\t0";
    out += ex.hypothesis_has_c ? "\t1\n" : "\t0\n";
  }
  return out;
}

inline std::string format_probe(const std::vector<ProbeExample>& examples) {
  std::string out;
  out.reserve(examples.size() * 20);
  for (const ProbeExample& ex : examples) {
    out += ex.text.str();
    out += ex.has_c ? "\t1\n" : "\t0\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline bool parse_flag(const std::string& s, std::size_t line_no) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw FormatError("line " + std::to_string(line_no) + ": expected 0 or 1, got '" + s + "'");
}

inline SymbolString parse_symbols(const std::string& s, std::size_t line_no) {
  try {
    return SymbolString(s);
  } catch (const PreconditionError& e) {
    throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
  }
}

}  // namespace detail

/// Parses a pair file and re-checks the label invariants of every line.
inline std::vector<ExamplePair> parse_pairs(const std::string& text) {
  std::vector<ExamplePair> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 5) {
      throw FormatError("line " + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(f.size()));
    }
    ExamplePair ex{detail::parse_symbols(f[0], line_no), detail::parse_symbols(f[1], line_no),
                   detail::parse_flag(f[2], line_no), detail::parse_flag(f[3], line_no),
                   detail::parse_flag(f[4], line_no)};
    if (ex.entailed != entailment_label(ex.premise, ex.hypothesis) ||
        ex.premise_has_c != ex.premise.has_c() || ex.hypothesis_has_c != ex.hypothesis.has_c()) {
      throw FormatError("line " + std::to_string(line_no) + ": labels disagree with strings");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<ProbeExample> parse_probe(const std::string& text) {
  std::vector<ProbeExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 2) {
      throw FormatError("line " + std::to_string(line_no) + ": expected 2 fields, got " +
                        std::to_string(f.size()));
    }
    ProbeExample ex{detail::parse_symbols(f[0], line_no), detail::parse_flag(f[1], line_no)};
    if (ex.has_c != ex.text.has_c()) {
      throw FormatError("line " + std::to_string(line_no) + ": label disagrees with string");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << bytes;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// File names inside a dataset directory, in manifest order.
inline const std::vector<std::string>& dataset_file_names() {
  static const std::vector<std::string> names = {"train.tsv",       "dev.tsv",
                                                 "test.tsv",        "probe_train.tsv",
                                                 "probe_dev.tsv",   "probe_test.tsv"};
  return names;
}

/// Writes the task splits of `task` and the probe data into `dir` together
/// with manifest.json. Returns the combined content digest.
inline std::string write_dataset_dir(const std::filesystem::path& dir, const DatasetSplits& task,
                                     const ProbeDataset& probe, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const std::vector<std::string> contents = {
      format_pairs(task.train), format_pairs(task.dev),  format_pairs(task.test),
      format_probe(probe.train), format_probe(probe.dev), format_probe(probe.test)};
  const auto& names = dataset_file_names();
  nlohmann::ordered_json manifest;
  manifest["format"] = "probelab-dataset";
  manifest["version"] = kDatasetFormatVersion;
  manifest["regime"] = std::string(regime_name(task.regime));
  manifest["seed"] = seed;
  manifest["sizes"] = {{"train", task.train.size()},
                       {"dev", task.dev.size()},
                       {"test", task.test.size()},
                       {"probe_train", probe.train.size()},
                       {"probe_dev", probe.dev.size()},
                       {"probe_test", probe.test.size()}};
  Fnv1a64 combined;
  nlohmann::ordered_json files;
  for (std::size_t i = 0; i < names.size(); ++i) {
    write_file(dir / names[i], contents[i]);
    files[names[i]] = digest_hex(contents[i]);
    combined.update(contents[i]);
  }
  manifest["files"] = files;
  manifest["digest"] = combined.hex();
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return combined.hex();
}

struct LoadedDataset {
  DatasetSplits task;
  ProbeDataset probe;
  std::uint64_t seed = 0;
  std::string digest;
};

/// Loads a directory written by write_dataset_dir, verifying file digests.
inline LoadedDataset read_dataset_dir(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != "probelab-dataset" ||
      manifest.value("version", 0) != kDatasetFormatVersion) {
    throw FormatError(dir.string() + ": not a probelab dataset manifest");
  }
  LoadedDataset out;
  out.task.regime = parse_regime(manifest.at("regime").get<std::string>());
  out.seed = manifest.at("seed").get<std::uint64_t>();
  out.digest = manifest.at("digest").get<std::string>();
  std::vector<std::string> contents;
  for (const auto& name : dataset_file_names()) {
    contents.push_back(read_file(dir / name));
    const auto expected = manifest.at("files").at(name).get<std::string>();
    if (digest_hex(contents.back()) != expected) {
      throw FormatError(dir.string() + "/" + name + ": digest mismatch with manifest");
    }
  }
  out.task.train = parse_pairs(contents[0]);
  out.task.dev = parse_pairs(contents[1]);
  out.task.test = parse_pairs(contents[2]);
  out.probe.train = parse_probe(contents[3]);
  out.probe.dev = parse_probe(contents[4]);
  out.probe.test = parse_probe(contents[5]);
  return out;
}

}  // namespace probelab
