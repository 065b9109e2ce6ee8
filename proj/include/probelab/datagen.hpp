#pragma once

// Synthetic entailment data over the alphabet {a, b, c}. A hypothesis is
// entailed iff it starts with the same letter as the premise; the marker 'c'
// is inserted according to one of four contamination regimes.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "probelab/errors.hpp"
#include "probelab/random.hpp"

namespace probelab {

inline constexpr std::size_t kMaxStringLength = 30;
inline constexpr std::size_t kMaxBaseLength = kMaxStringLength - 1;
inline constexpr std::size_t kOversampleFactor = 10;

enum class Regime { kNoise, kUncorrelated, kPartial, kFull };

inline constexpr std::array<Regime, 4> kAllRegimes = {Regime::kNoise, Regime::kUncorrelated,
                                                      Regime::kPartial, Regime::kFull};

inline std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::kNoise:
      return "NOISE";
    case Regime::kUncorrelated:
      return "UNCORRELATED";
    case Regime::kPartial:
      return "PARTIAL";
    case Regime::kFull:
      return "FULL";
  }
  return "?";
}

inline Regime parse_regime(std::string_view name) {
  std::string upper(name);
  for (char& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  for (Regime r : kAllRegimes) {
    if (regime_name(r) == upper) return r;
  }
  throw ConfigError("unknown regime '" + std::string(name) +
                    "' (expected NOISE, UNCORRELATED, PARTIAL or FULL)");
}

/// A string over {a,b,c} of length 1..30 whose first symbol is 'a' or 'b'.
class SymbolString {
 public:
  SymbolString() = default;

  explicit SymbolString(std::string chars) : chars_(std::move(chars)) {
    if (chars_.empty() || chars_.size() > kMaxStringLength) {
      throw PreconditionError("symbol string length " + std::to_string(chars_.size()) +
                              " outside [1, 30]");
    }
    if (chars_[0] != 'a' && chars_[0] != 'b') {
      throw PreconditionError("symbol string '" + chars_ + "' must start with 'a' or 'b'");
    }
    for (char ch : chars_) {
      if (ch != 'a' && ch != 'b' && ch != 'c') {
        throw PreconditionError("symbol string '" + chars_ + "' has a symbol outside {a,b,c}");
      }
    }
  }

  const std::string& str() const { return chars_; }
  std::size_t size() const { return chars_.size(); }
  char operator[](std::size_t i) const { return chars_[i]; }
  char front() const { return chars_.front(); }
  bool has_c() const { return chars_.find('c') != std::string::npos; }

  friend bool operator==(const SymbolString&, const SymbolString&) = default;

 private:
  std::string chars_;
};

struct ExamplePair {
  SymbolString premise;
  SymbolString hypothesis;
  bool entailed = false;
  bool premise_has_c = false;
  bool hypothesis_has_c = false;

  friend bool operator==(const ExamplePair&, const ExamplePair&) = default;
};

struct SplitSizes {
  std::size_t train = 20000;
  std::size_t dev = 5000;
  std::size_t test = 5000;
};

inline constexpr SplitSizes kTaskSplitSizes{20000, 5000, 5000};
inline constexpr SplitSizes kProbeSplitSizes{23732, 5000, 5000};

struct DatasetSplits {
  Regime regime = Regime::kNoise;
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> dev;
  std::vector<ExamplePair> test;
};

struct ProbeExample {
  SymbolString text;
  bool has_c = false;

  friend bool operator==(const ProbeExample&, const ProbeExample&) = default;
};

struct ProbeDataset {
  std::vector<ProbeExample> train;
  std::vector<ProbeExample> dev;
  std::vector<ProbeExample> test;
};

// ---------------------------------------------------------------------------
// Primitive sampling

/// Uniform length in [1, max_len], each symbol uniform over {a, b}.
inline SymbolString sample_base_string(Rng& rng, std::size_t max_len = kMaxBaseLength) {
  if (max_len == 0 || max_len > kMaxBaseLength) {
    throw PreconditionError("sample_base_string: max_len must be in [1, 29]");
  }
  const std::size_t len = 1 + static_cast<std::size_t>(uniform_index(rng, max_len));
  std::string s(len, 'a');
  for (char& ch : s) ch = coin_flip(rng) ? 'b' : 'a';
  return SymbolString(std::move(s));
}

inline bool entailment_label(const SymbolString& premise, const SymbolString& hypothesis) {
  return premise.front() == hypothesis.front();
}

/// Inserts one 'c' at a uniform position in [1, len], i.e. never before the
/// first symbol.
inline SymbolString insert_c(const SymbolString& s, Rng& rng) {
  if (s.has_c()) throw PreconditionError("insert_c: '" + s.str() + "' already contains 'c'");
  if (s.size() >= kMaxStringLength) {
    throw PreconditionError("insert_c: '" + s.str() + "' is already at maximum length");
  }
  const std::size_t pos = 1 + static_cast<std::size_t>(uniform_index(rng, s.size()));
  std::string out = s.str();
  out.insert(pos, 1, 'c');
  return SymbolString(std::move(out));
}

// ---------------------------------------------------------------------------
// Regime datasets

namespace detail {

struct StringHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
};

}  // namespace detail

using StringSet = std::unordered_set<std::string, detail::StringHash, std::equal_to<>>;

namespace detail {

/// A base string whose first symbol is given; length and the remaining
/// symbols are distributed as in sample_base_string.
inline SymbolString sample_with_first(Rng& rng, char first) {
  const std::size_t len = 1 + static_cast<std::size_t>(uniform_index(rng, kMaxBaseLength));
  std::string s(len, first);
  for (std::size_t i = 1; i < len; ++i) s[i] = coin_flip(rng) ? 'b' : 'a';
  return SymbolString(std::move(s));
}

/// Which sides receive a 'c' for a base pair under a regime.
inline std::pair<bool, bool> regime_insertions(Regime regime, const SymbolString& premise,
                                               const SymbolString& hypothesis, bool entailed,
                                               Rng& rng) {
  switch (regime) {
    case Regime::kNoise: {
      const bool p = coin_flip(rng);
      const bool h = coin_flip(rng);
      return {p, h};
    }
    case Regime::kUncorrelated:
      return {premise.front() == 'a', false};
    case Regime::kPartial:
      return {premise.front() == 'a', hypothesis.front() == 'a'};
    case Regime::kFull:
      return {entailed, entailed};
  }
  return {false, false};
}

}  // namespace detail

/// Generates train/dev/test for one regime. A string is owned by the first
/// split that uses it; later splits reject pairs touching a foreign string,
/// and exact duplicate pairs within a split are rejected.
inline DatasetSplits build_regime_dataset(Regime regime, std::uint64_t seed,
                                          SplitSizes sizes = kTaskSplitSizes) {
  Rng rng(derive_seed(seed, std::string("task/") + std::string(regime_name(regime))));
  DatasetSplits out;
  out.regime = regime;
  std::unordered_map<std::string, int, detail::StringHash, std::equal_to<>> owner;

  const std::array<std::pair<std::vector<ExamplePair>*, std::size_t>, 3> targets = {
      std::pair{&out.train, sizes.train}, std::pair{&out.dev, sizes.dev},
      std::pair{&out.test, sizes.test}};

  for (int split = 0; split < 3; ++split) {
    auto& [examples, target] = targets[static_cast<std::size_t>(split)];
    examples->reserve(target);
    StringSet pairs_seen;
    const std::size_t budget = kOversampleFactor * target;
    std::size_t attempts = 0;
    while (examples->size() < target) {
      // First symbols are drawn once per slot; a rejection redraws only the
      // remaining symbols.
      const char p0 = coin_flip(rng) ? 'b' : 'a';
      const char h0 = coin_flip(rng) ? 'b' : 'a';
      while (true) {
        if (attempts++ >= budget) {
          throw GenerationError("regime " + std::string(regime_name(regime)) + ": split " +
                                std::to_string(split) + " reached only " +
                                std::to_string(examples->size()) + " of " +
                                std::to_string(target) + " examples within the sampling budget");
        }
        SymbolString premise = detail::sample_with_first(rng, p0);
        SymbolString hypothesis = detail::sample_with_first(rng, h0);
        const bool entailed = entailment_label(premise, hypothesis);
        const auto [c_premise, c_hypothesis] =
            detail::regime_insertions(regime, premise, hypothesis, entailed, rng);
        if (c_premise) premise = insert_c(premise, rng);
        if (c_hypothesis) hypothesis = insert_c(hypothesis, rng);

        const auto foreign = [&](const SymbolString& s) {
          auto it = owner.find(s.str());
          return it != owner.end() && it->second != split;
        };
        if (foreign(premise) || foreign(hypothesis)) continue;
        std::string key = premise.str() + '|' + hypothesis.str();
        if (!pairs_seen.insert(std::move(key)).second) continue;

        owner.emplace(premise.str(), split);
        owner.emplace(hypothesis.str(), split);
        examples->push_back(ExamplePair{std::move(premise), std::move(hypothesis), entailed,
                                        c_premise, c_hypothesis});
        break;
      }
    }
  }
  return out;
}

inline void collect_strings(const DatasetSplits& splits, StringSet& into) {
  for (const auto* part : {&splits.train, &splits.dev, &splits.test}) {
    for (const ExamplePair& ex : *part) {
      into.insert(ex.premise.str());
      into.insert(ex.hypothesis.str());
    }
  }
}

/// Probe strings from (a|b)* with a 'c' inserted into exactly half of each
/// split (the odd example, if any, goes to the negative class). Every string
/// is unique within the dataset and absent from `excluded`.
inline ProbeDataset build_probe_dataset(std::uint64_t seed, const StringSet& excluded,
                                        SplitSizes sizes = kProbeSplitSizes) {
  Rng rng(derive_seed(seed, "probe"));
  ProbeDataset out;
  StringSet used;
  const std::array<std::pair<std::vector<ProbeExample>*, std::size_t>, 3> targets = {
      std::pair{&out.train, sizes.train}, std::pair{&out.dev, sizes.dev},
      std::pair{&out.test, sizes.test}};
  for (auto& [examples, target] : targets) {
    std::vector<std::uint8_t> labels(target, 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(target / 2), 1);
    shuffle(std::span<std::uint8_t>(labels), rng);

    examples->reserve(target);
    const std::size_t budget = kOversampleFactor * target;
    std::size_t attempts = 0;
    for (std::uint8_t label : labels) {
      while (true) {
        if (attempts++ >= budget) {
          throw GenerationError("probe dataset: reached only " +
                                std::to_string(examples->size()) + " of " +
                                std::to_string(target) +
                                " examples within the sampling budget");
        }
        SymbolString s = sample_base_string(rng);
        if (label) s = insert_c(s, rng);
        if (excluded.contains(s.str()) || used.contains(s.str())) continue;
        used.insert(s.str());
        examples->push_back(ProbeExample{std::move(s), label != 0});
        break;
      }
    }
  }
  return out;
}

/// The four regime datasets of one seed plus the probe data shared by all of
/// them (disjoint from every regime's strings).
struct Corpus {
  std::uint64_t seed = 0;
  std::array<DatasetSplits, 4> regimes;
  ProbeDataset probe;

  const DatasetSplits& task(Regime r) const { return regimes[static_cast<std::size_t>(r)]; }
};

inline Corpus build_corpus(std::uint64_t seed, SplitSizes task_sizes = kTaskSplitSizes,
                           SplitSizes probe_sizes = kProbeSplitSizes) {
  Corpus c;
  c.seed = seed;
  StringSet all;
  for (Regime r : kAllRegimes) {
    c.regimes[static_cast<std::size_t>(r)] = build_regime_dataset(r, seed, task_sizes);
    collect_strings(c.regimes[static_cast<std::size_t>(r)], all);
  }
  c.probe = build_probe_dataset(seed, all, probe_sizes);
  return c;
}

// ---------------------------------------------------------------------------
// Control partition

/// One example annotated with a task label and a discrete property value.
template <typename Input, typename Label, typename Prop>
struct PropertyExample {
  Input input;
  Label task_label;
  Prop prop_value;
};

template <typename T>
struct ControlPartition {
  std::vector<T> examples;
  /// Set when no example carried the requested value.
  std::optional<std::string> warning;
};

/// Keeps the examples whose property equals `value`, in their original
/// order, so the property is constant across the result.
template <typename T, typename Selector, typename V>
ControlPartition<T> control_partition(std::span<const T> examples, Selector property,
                                      const V& value) {
  ControlPartition<T> out;
  for (const T& ex : examples) {
    if (property(ex) == value) out.examples.push_back(ex);
  }
  if (out.examples.empty()) {
    out.warning = "control partition is empty: no example has the requested property value";
  }
  return out;
}

template <typename Input, typename Label, typename Prop>
ControlPartition<PropertyExample<Input, Label, Prop>> control_partition(
    std::span<const PropertyExample<Input, Label, Prop>> examples, const Prop& value) {
  return control_partition(examples,
                           [](const PropertyExample<Input, Label, Prop>& ex) -> const Prop& {
                             return ex.prop_value;
                           },
                           value);
}

// ---------------------------------------------------------------------------
// Leakage

/// A named bag of strings taking part in the leakage check. Splits in the
/// same group must be disjoint from each other; probe splits must be disjoint
/// from every task split.
struct LeakageSplit {
  std::string name;
  std::string group;
  bool is_probe = false;
  std::vector<std::string> strings;
};

struct LeakageEntry {
  std::string text;
  std::vector<std::string> splits;
};

inline std::vector<LeakageSplit> leakage_splits(const DatasetSplits& d) {
  const std::string group(regime_name(d.regime));
  std::vector<LeakageSplit> out;
  const std::array<std::pair<const char*, const std::vector<ExamplePair>*>, 3> parts = {
      std::pair{"train", &d.train}, std::pair{"dev", &d.dev}, std::pair{"test", &d.test}};
  for (const auto& [name, part] : parts) {
    LeakageSplit s{group + "/" + name, group, false, {}};
    for (const ExamplePair& ex : *part) {
      s.strings.push_back(ex.premise.str());
      s.strings.push_back(ex.hypothesis.str());
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<LeakageSplit> leakage_splits(const ProbeDataset& d) {
  std::vector<LeakageSplit> out;
  const std::array<std::pair<const char*, const std::vector<ProbeExample>*>, 3> parts = {
      std::pair{"train", &d.train}, std::pair{"dev", &d.dev}, std::pair{"test", &d.test}};
  for (const auto& [name, part] : parts) {
    LeakageSplit s{std::string("PROBE/") + name, "PROBE", true, {}};
    for (const ProbeExample& ex : *part) s.strings.push_back(ex.text.str());
    out.push_back(std::move(s));
  }
  return out;
}

/// Every string that crosses a split boundary it must not cross, with the
/// names of all splits it occurs in. Empty means no leakage.
inline std::vector<LeakageEntry> leakage_check(std::span<const LeakageSplit> splits) {
  // string -> indices of splits containing it, in split order
  std::unordered_map<std::string_view, std::vector<std::size_t>> where;
  std::vector<std::string_view> order;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    for (const std::string& s : splits[i].strings) {
      auto [it, fresh] = where.try_emplace(s);
      if (fresh) order.push_back(s);
      if (it->second.empty() || it->second.back() != i) it->second.push_back(i);
    }
  }
  const auto conflict = [&](std::size_t a, std::size_t b) {
    const LeakageSplit& x = splits[a];
    const LeakageSplit& y = splits[b];
    if (x.is_probe != y.is_probe) return true;
    return x.group == y.group;
  };
  std::vector<LeakageEntry> report;
  for (std::string_view s : order) {
    const auto& idx = where[s];
    bool leaked = false;
    for (std::size_t a = 0; a < idx.size() && !leaked; ++a)
      for (std::size_t b = a + 1; b < idx.size() && !leaked; ++b) leaked = conflict(idx[a], idx[b]);
    if (!leaked) continue;
    LeakageEntry e{std::string(s), {}};
    for (std::size_t i : idx) e.splits.push_back(splits[i].name);
    report.push_back(std::move(e));
  }
  return report;
}

inline std::vector<LeakageEntry> leakage_check(const Corpus& corpus) {
  std::vector<LeakageSplit> all;
  for (const auto& d : corpus.regimes) {
    auto s = leakage_splits(d);
    all.insert(all.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  auto p = leakage_splits(corpus.probe);
  all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  return leakage_check(all);
}

}  // namespace probelab
