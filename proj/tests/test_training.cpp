// Training loops, probing and evaluation on small problems.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "probelab/checkpoint.hpp"
#include "probelab/datagen.hpp"
#include "probelab/training.hpp"

using namespace probelab;

namespace {

ExamplePair pair(const char* p, const char* h) {
  ExamplePair ex{SymbolString(p), SymbolString(h), false, false, false};
  ex.entailed = entailment_label(ex.premise, ex.hypothesis);
  ex.premise_has_c = ex.premise.has_c();
  ex.hypothesis_has_c = ex.hypothesis.has_c();
  return ex;
}

TrainConfig small_config(std::size_t epochs = 3) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.seed = 7;
  return c;
}

const DatasetSplits& small_noise() {
  static const DatasetSplits d = build_regime_dataset(Regime::kNoise, 3, {1500, 300, 300});
  return d;
}

EncoderConfig small_bilstm() { return {EncoderKind::kBiLstm, PoolMode::kLast, 12, 8}; }

struct Model {
  Encoder encoder;
  PairHead head;
  explicit Model(EncoderConfig cfg = small_bilstm(), std::uint64_t seed = 11) {
    Rng rng(seed);
    encoder = Encoder(cfg, rng);
    head = PairHead(encoder.output_dim(), rng);
  }
};

/// Class 1 has x0 > 0, class 0 has x0 < 0; other columns are uniform noise.
void separable(std::size_t n, std::size_t d, Rng& rng, Tensor& x, std::vector<std::size_t>& y) {
  x = Tensor({n, d});
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 2;
    for (std::size_t j = 0; j < d; ++j) x.row(i)[j] = uniform_real(rng, -1.0, 1.0);
    x.row(i)[0] = (y[i] ? 1.0 : -1.0) * uniform_real(rng, 0.2, 1.0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation helpers

TEST(Evaluation, ArgmaxBreaksTiesTowardLowerClass) {
  const std::vector<double> tie{0.3, 0.3}, second{-1.0, 2.0};
  EXPECT_EQ(argmax(tie), 0u);
  EXPECT_EQ(argmax(second), 1u);
}

TEST(Evaluation, AccuracyCountsArgmaxMatches) {
  Tensor logits({4, 2});
  const double v[] = {1, 0, 0, 1, 2, 3, 5, 5};
  std::copy(std::begin(v), std::end(v), logits.data().begin());
  // Predictions 0, 1, 1, 0 against labels 0, 1, 0, 1.
  const std::vector<std::size_t> labels{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(accuracy(logits, labels), 0.5);
  EXPECT_THROW(accuracy(logits, std::vector<std::size_t>{0, 1}), DimensionError);
  EXPECT_THROW(accuracy(logits, std::vector<std::size_t>{}), PreconditionError);
}

TEST(Evaluation, MajorityBaselineOnHandLabelledPairs) {
  // Ten hand-checked pairs: premise and hypothesis agree on the first symbol
  // in exactly six of them.
  const std::vector<ExamplePair> pairs = {
      pair("ab", "a"),   pair("b", "ba"),  pair("aab", "abc"), pair("ba", "bb"),
      pair("a", "ac"),   pair("bc", "b"),  pair("a", "b"),     pair("ba", "ab"),
      pair("abc", "ba"), pair("bb", "ab")};
  std::size_t entailed = 0;
  for (const ExamplePair& ex : pairs) entailed += ex.entailed;
  ASSERT_EQ(entailed, 6u);
  EXPECT_DOUBLE_EQ(majority_baseline(std::span<const ExamplePair>(pairs),
                                     [](const ExamplePair& ex) { return ex.entailed; }),
                   0.6);
  // Two of the ten premises contain 'c'.
  EXPECT_DOUBLE_EQ(majority_baseline(std::span<const ExamplePair>(pairs),
                                     [](const ExamplePair& ex) { return ex.premise_has_c; }),
                   0.8);
  EXPECT_THROW(majority_baseline(std::span<const ExamplePair>(),
                                 [](const ExamplePair& ex) { return ex.entailed; }),
               PreconditionError);
}

TEST(Evaluation, EvaluateTaskMatchesPerExampleClassification) {
  Model m;
  const auto& dev = small_noise().dev;
  const std::span<const ExamplePair> some(dev.data(), 40);
  std::size_t correct = 0;
  for (const ExamplePair& ex : some) {
    Tape tape(false);
    const std::string_view p[] = {ex.premise.str()}, h[] = {ex.hypothesis.str()};
    const Tensor& logits = classify_pair(tape, m.encoder, m.head, p, h).value();
    correct += argmax(logits.row(0)) == static_cast<std::size_t>(ex.entailed);
  }
  EXPECT_DOUBLE_EQ(evaluate_task(m.encoder, m.head, some), correct / 40.0);
}

TEST(Evaluation, EvaluateAdversaryPoolsBothSides) {
  Model m;
  Rng rng(5);
  MlpHead adv(m.encoder.output_dim(), {1, 6}, rng);
  const auto& dev = small_noise().dev;
  const std::span<const ExamplePair> some(dev.data(), 30);
  std::size_t correct = 0;
  for (const ExamplePair& ex : some) {
    for (const auto& [s, label] : {std::pair{&ex.premise, ex.premise_has_c},
                                   std::pair{&ex.hypothesis, ex.hypothesis_has_c}}) {
      const std::string_view t[] = {s->str()};
      Tape tape(false);
      const Tensor rep = m.encoder.encode_batch(tape, t).value();
      correct += argmax(adv.logits(rep).data()) == static_cast<std::size_t>(label);
    }
  }
  EXPECT_DOUBLE_EQ(evaluate_adversary(m.encoder, adv, some), correct / 60.0);
}

TEST(Evaluation, EncodeAllMatchesOneAtATime) {
  Model m;
  const std::vector<std::string_view> texts{"a", "abcab", "bbbbbbbbbbbbbbbbbbbbbbbbbbbbbb",
                                            "ba"};
  const Tensor all = encode_all(m.encoder, texts);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Tape tape(false);
    const Tensor one = m.encoder.encode_batch(tape, std::span(&texts[i], 1)).value();
    for (std::size_t j = 0; j < one.size(); ++j) EXPECT_NEAR(all.row(i)[j], one[j], 1e-12);
  }
  EXPECT_THROW(encode_all(m.encoder, {}), PreconditionError);
}

// ---------------------------------------------------------------------------
// Task training

TEST(TaskTraining, ZeroLearningRateLeavesParametersUnchanged) {
  Model m;
  std::vector<Parameter*> params = m.encoder.parameters();
  for (Parameter* p : m.head.parameters()) params.push_back(p);
  const std::string before = parameter_digest(params);
  TrainConfig cfg = small_config(2);
  cfg.learning_rate = 0.0;
  train_task(m.encoder, m.head, small_noise(), cfg);
  EXPECT_EQ(parameter_digest(params), before);
}

TEST(TaskTraining, LearnsTheNoiseRegimeAndKeepsBestSnapshot) {
  Model m;
  const TaskResult r = train_task(m.encoder, m.head, small_noise(), small_config(4));
  const TrainHistory& h = r.history;
  ASSERT_FALSE(h.dev_acc.empty());
  ASSERT_EQ(r.metrics.epochs_run, h.dev_acc.size());
  // The kept epoch is the first occurrence of the maximum.
  for (std::size_t e = 0; e < h.dev_acc.size(); ++e) {
    if (e < h.best_epoch) EXPECT_LT(h.dev_acc[e], h.dev_acc[h.best_epoch]);
    else EXPECT_LE(h.dev_acc[e], h.dev_acc[h.best_epoch]);
  }
  EXPECT_EQ(*r.metrics.task_dev_acc, h.dev_acc[h.best_epoch]);
  // Restored parameters reproduce the recorded dev accuracy.
  EXPECT_DOUBLE_EQ(evaluate_task(m.encoder, m.head, small_noise().dev), *r.metrics.task_dev_acc);
  EXPECT_GT(*r.metrics.task_dev_acc, 0.9);
}

TEST(TaskTraining, EarlyStoppingRule) {
  // With a zero learning rate dev accuracy never strictly improves after the
  // first epoch, so training stops after exactly 1 + patience epochs.
  Model m(small_bilstm(), 2);
  TrainConfig cfg = small_config(10);
  cfg.patience = 2;
  cfg.learning_rate = 0.0;
  const TaskResult r = train_task(m.encoder, m.head, small_noise(), cfg);
  ASSERT_LT(r.history.dev_acc[0], 1.0);
  EXPECT_EQ(r.history.dev_acc.size(), 3u);
  EXPECT_EQ(r.history.best_epoch, 0u);
  cfg.patience = 20;
  Model n(small_bilstm(), 2);
  EXPECT_EQ(train_task(n.encoder, n.head, small_noise(), cfg).history.dev_acc.size(), 10u);
}

TEST(TaskTraining, DeterministicForFixedSeed) {
  Model a, b;
  train_task(a.encoder, a.head, small_noise(), small_config(1));
  train_task(b.encoder, b.head, small_noise(), small_config(1));
  EXPECT_EQ(parameter_digest(a.encoder.parameters()), parameter_digest(b.encoder.parameters()));
  EXPECT_EQ(parameter_digest(a.head.parameters()), parameter_digest(b.head.parameters()));
}

TEST(TaskTraining, NonFiniteLossIsReported) {
  Model m;
  m.head.parameters().front()->value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_task(m.encoder, m.head, small_noise(), small_config(1));
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(TaskTraining, RejectsInvalidConfigAndShapes) {
  Model m;
  TrainConfig cfg = small_config();
  cfg.batch_size = 0;
  EXPECT_THROW(train_task(m.encoder, m.head, small_noise(), cfg), ConfigError);
  cfg = small_config();
  cfg.lambda = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Rng rng(1);
  PairHead wrong(5, rng);
  EXPECT_THROW(train_task(m.encoder, wrong, small_noise(), small_config()), DimensionError);
  EXPECT_THROW(train_task(m.encoder, m.head, DatasetSplits{}, small_config()), PreconditionError);
}

// ---------------------------------------------------------------------------
// Adversarial training

TEST(AdversarialTraining, ZeroLambdaMatchesPlainTrainingBitwise) {
  Model plain, adv;
  Rng rng(21);
  MlpHead adversary(adv.encoder.output_dim(), {1, 10}, rng, "adversary");
  train_task(plain.encoder, plain.head, small_noise(), small_config(2));
  TrainConfig cfg = small_config(2);
  cfg.lambda = 0.0;
  const TaskResult r = train_adversarial(adv.encoder, adv.head, adversary, small_noise(), cfg);
  EXPECT_EQ(parameter_digest(plain.encoder.parameters()),
            parameter_digest(adv.encoder.parameters()));
  EXPECT_EQ(parameter_digest(plain.head.parameters()), parameter_digest(adv.head.parameters()));
  ASSERT_TRUE(r.metrics.adversary_acc.has_value());
  EXPECT_DOUBLE_EQ(*r.metrics.adversary_acc,
                   evaluate_adversary(adv.encoder, adversary, small_noise().dev));
}

TEST(AdversarialTraining, PositiveLambdaChangesTheEncoder) {
  Model plain, adv;
  Rng rng(21);
  MlpHead adversary(adv.encoder.output_dim(), {1, 10}, rng, "adversary");
  train_task(plain.encoder, plain.head, small_noise(), small_config(1));
  TrainConfig cfg = small_config(1);
  cfg.lambda = 1.0;
  train_adversarial(adv.encoder, adv.head, adversary, small_noise(), cfg);
  EXPECT_NE(parameter_digest(plain.encoder.parameters()),
            parameter_digest(adv.encoder.parameters()));
}

TEST(AdversarialTraining, AdversaryWidthMustMatchEncoder) {
  Model m;
  Rng rng(1);
  MlpHead adversary(3, {1, 10}, rng);
  EXPECT_THROW(train_adversarial(m.encoder, m.head, adversary, small_noise(), small_config()),
               DimensionError);
}

// ---------------------------------------------------------------------------
// Probing

TEST(Probing, SeparableFeaturesReachPerfectAccuracy) {
  Rng rng(3);
  Tensor xtr, xdev, xte;
  std::vector<std::size_t> ytr, ydev, yte;
  separable(600, 5, rng, xtr, ytr);
  separable(200, 5, rng, xdev, ydev);
  separable(200, 5, rng, xte, yte);
  MlpHead head(5, {1, 10}, rng);
  TrainConfig cfg = small_config(30);
  cfg.learning_rate = 1e-2;
  const ProbeResult r = train_head_on_features(head, xtr, ytr, xdev, ydev, xte, yte, cfg, "probe");
  EXPECT_DOUBLE_EQ(r.test_acc, 1.0);
}

TEST(Probing, PlantedPropertyDimensionIsFound) {
  // Noise features plus one coordinate equal to the label.
  const ProbeDataset data = build_probe_dataset(4, {}, {2000, 400, 400});
  const auto features = [](const std::vector<ProbeExample>& split, Rng& rng,
                           std::vector<std::size_t>& y) {
    Tensor x({split.size(), 8});
    for (std::size_t i = 0; i < split.size(); ++i) {
      for (std::size_t j = 0; j < 8; ++j) x.row(i)[j] = uniform_real(rng, -1.0, 1.0);
      x.row(i)[3] = split[i].has_c ? 1.0 : 0.0;
      y.push_back(split[i].has_c);
    }
    return x;
  };
  Rng rng(8);
  std::vector<std::size_t> ytr, ydev, yte;
  const Tensor xtr = features(data.train, rng, ytr), xdev = features(data.dev, rng, ydev),
               xte = features(data.test, rng, yte);
  MlpHead head(8, {1, 20}, rng);
  const ProbeResult r =
      train_head_on_features(head, xtr, ytr, xdev, ydev, xte, yte, small_config(10), "probe");
  EXPECT_GE(r.test_acc, 0.99);
}

TEST(Probing, ConstantEncoderGivesChance) {
  // A CBOW encoder with zero embeddings maps every string to the same
  // vector, so any probe predicts one class for all of a balanced test set.
  Rng rng(1);
  Encoder enc({EncoderKind::kCbow, PoolMode::kLast, 0, 6}, rng);
  enc.parameters().front()->value.fill(0.0);
  const ProbeDataset data = build_probe_dataset(4, {}, {400, 100, 100});
  MlpHead probe(enc.output_dim(), {1, 10}, rng);
  const ProbeResult r = train_probe(enc, probe, data, small_config(3));
  EXPECT_DOUBLE_EQ(r.test_acc, 0.5);
}

TEST(Probing, EncoderIsNotModifiedByProbeOrAttacker) {
  Model m;
  const ProbeDataset data = build_probe_dataset(4, {}, {300, 100, 100});
  const std::string before = parameter_digest(m.encoder.parameters());
  Rng rng(2);
  MlpHead probe(m.encoder.output_dim(), {2, 10}, rng);
  MlpHead attacker(m.encoder.output_dim(), {1, 10}, rng);
  train_probe(m.encoder, probe, data, small_config(2));
  train_attacker(m.encoder, attacker, data, small_config(2));
  EXPECT_EQ(parameter_digest(m.encoder.parameters()), before);
}

TEST(Probing, CachedFeaturesGiveTheSameResultAsEncodingAgain) {
  Model m;
  const ProbeDataset data = build_probe_dataset(4, {}, {300, 100, 100});
  const ProbeFeatures f = encode_probe_features(m.encoder, data);
  EXPECT_EQ(f.train_x.rows(), 300u);
  EXPECT_EQ(f.encoder_digest, parameter_digest(m.encoder.parameters()));
  Rng r1(2), r2(2);
  MlpHead a(m.encoder.output_dim(), {1, 10}, r1), b(m.encoder.output_dim(), {1, 10}, r2);
  const double direct = train_probe(m.encoder, a, data, small_config(2)).test_acc;
  const double cached = train_head_on_features(b, f, small_config(2), "probe").test_acc;
  EXPECT_EQ(direct, cached);
  EXPECT_EQ(parameter_digest(a.parameters()), parameter_digest(b.parameters()));
}

TEST(Probing, RejectsMismatchedInput) {
  Rng rng(1);
  Tensor x({4, 3});
  const std::vector<std::size_t> y{0, 1, 0, 1};
  MlpHead head(5, {1, 4}, rng);
  EXPECT_THROW(train_head_on_features(head, x, y, x, y, x, y, small_config(), "probe"),
               DimensionError);
  MlpHead ok(3, {1, 4}, rng);
  EXPECT_THROW(train_head_on_features(ok, x, y, x, {}, x, y, small_config(), "probe"),
               PreconditionError);
}
