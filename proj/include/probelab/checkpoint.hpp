#pragma once

// Flat key -> tensor archive. Layout (text, one record per line):
//
//   probelab-checkpoint 1
//   meta <key> <value>            (repeated, sorted by key)
//   tensor <name> <rank> <dims...>
//   <row-major values, %.17g, space separated>
//
// Values round-trip exactly through %.17g.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "probelab/dataset_io.hpp"
#include "probelab/digest.hpp"
#include "probelab/errors.hpp"
#include "probelab/tape.hpp"
#include "probelab/tensor.hpp"

namespace probelab {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::map<std::string, std::string> manifest;
  std::vector<NamedTensor> tensors;
};

/// Digest over names, shapes and exact bit patterns of parameter values.
inline std::string parameter_digest(const std::vector<const Parameter*>& params) {
  Fnv1a64 h;
  for (const Parameter* p : params) {
    h.update(p->name);
    h.update(shape_str(p->value.shape()));
    const auto data = p->value.data();
    h.update(std::string_view(reinterpret_cast<const char*>(data.data()),
                              data.size() * sizeof(double)));
  }
  return h.hex();
}

inline std::string parameter_digest(const std::vector<Parameter*>& params) {
  return parameter_digest(std::vector<const Parameter*>(params.begin(), params.end()));
}

inline std::string format_checkpoint(const Checkpoint& ckpt) {
  std::string out = "probelab-checkpoint 1\n";
  for (const auto& [k, v] : ckpt.manifest) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("checkpoint manifest entry '" + k + "' contains a separator");
    }
    out += "meta " + k + " " + v + "\n";
  }
  char buf[32];
  for (const NamedTensor& t : ckpt.tensors) {
    out += "tensor " + t.name + " " + std::to_string(t.value.rank());
    for (std::size_t d : t.value.shape()) out += " " + std::to_string(d);
    out += "\n";
    const auto data = t.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", data[i]);
      if (i) out += ' ';
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "probelab-checkpoint 1") {
    throw FormatError("not a probelab checkpoint");
  }
  Checkpoint ckpt;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.manifest[key] = value;
    } else if (kind == "tensor") {
      NamedTensor t;
      std::size_t rank = 0;
      ls >> t.name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls || rank == 0) throw FormatError("malformed tensor header: " + line);
      std::string values;
      if (!std::getline(in, values)) throw FormatError("missing values for " + t.name);
      std::vector<double> data;
      data.reserve(shape_numel(shape));
      const char* p = values.c_str();
      char* end = nullptr;
      while (true) {
        const double v = std::strtod(p, &end);
        if (end == p) break;
        data.push_back(v);
        p = end;
      }
      t.value = Tensor(std::move(shape), std::move(data));
      ckpt.tensors.push_back(std::move(t));
    } else {
      throw FormatError("unknown checkpoint record: " + kind);
    }
  }
  return ckpt;
}

inline Checkpoint make_checkpoint(std::map<std::string, std::string> manifest,
                                  const std::vector<const Parameter*>& params) {
  Checkpoint ckpt{std::move(manifest), {}};
  for (const Parameter* p : params) ckpt.tensors.push_back({p->name, p->value});
  return ckpt;
}

/// Copies archived values into parameters with matching names and shapes.
inline void restore_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const NamedTensor* found = nullptr;
    for (const NamedTensor& t : ckpt.tensors) {
      if (t.name == p->name) found = &t;
    }
    if (!found) throw FormatError("checkpoint has no tensor '" + p->name + "'");
    if (found->value.shape() != p->value.shape()) {
      throw DimensionError("checkpoint tensor '" + p->name + "' has shape " +
                           shape_str(found->value.shape()) + ", expected " +
                           shape_str(p->value.shape()));
    }
    p->value = found->value;
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, format_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

}  // namespace probelab
