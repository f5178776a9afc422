#pragma once

// Optimizer, epoch loop, evaluation, repeated trials and feature export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsvit/binary_io.hpp"
#include "tsvit/data.hpp"
#include "tsvit/model.hpp"

namespace tsvit {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::uint32_t batch_size = 32;
  std::uint32_t epochs = 200;
  std::uint64_t seed = 0;
  std::uint32_t trials = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Training is single-threaded with a fixed reduction order, so every run
  // is reproducible; the flag is kept so configs can state the requirement.
  bool deterministic = true;
  bool standardize = false;

  void validate() const {
    if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (trials == 0) throw ConfigError("trials must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam

/// One Adam update with bias correction on a flat parameter array. `step`
/// is the 1-based update count.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const TrainConfig& cfg) {
  if (step == 0) throw ContractError("adam_update: step index starts at 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ContractError("adam_update: parameter, gradient and moment sizes differ");
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double lr = cfg.learning_rate;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    param[i] = static_cast<T>(param[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps));
  }
}

template <typename T>
struct AdamState {
  ModelParams<T> m, v;
  std::uint64_t step = 0;

  static AdamState for_model(const TsvitModel<T>& model) {
    return {ModelParams<T>::zeros(model.config), ModelParams<T>::zeros(model.config), 0};
  }
};

/// Applies model.grads to model.params and advances the step count.
template <typename T>
void adam_step(TsvitModel<T>& model, AdamState<T>& state, const TrainConfig& cfg) {
  std::vector<BasicTensor<T>*> params, grads, ms, vs;
  model.params.for_each([&](const std::string&, BasicTensor<T>& t) { params.push_back(&t); });
  model.grads.for_each([&](const std::string&, BasicTensor<T>& t) { grads.push_back(&t); });
  state.m.for_each([&](const std::string&, BasicTensor<T>& t) { ms.push_back(&t); });
  state.v.for_each([&](const std::string&, BasicTensor<T>& t) { vs.push_back(&t); });
  if (grads.size() != params.size() || ms.size() != params.size() || vs.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match the model");
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != ms[i]->shape()) {
      throw ContractError("adam_step: shape mismatch in parameter " + std::to_string(i));
    }
    adam_update<T>(params[i]->data(), grads[i]->data(), ms[i]->data(), vs[i]->data(), state.step, cfg);
  }
}

// ---------------------------------------------------------------------------
// Epochs and evaluation

inline void check_compatible(const TsvitConfig& cfg, const Dataset& ds) {
  if (ds.length != cfg.signal_length || ds.channels != cfg.channels || ds.num_classes() != cfg.num_classes) {
    throw ConfigError("dataset (L=" + std::to_string(ds.length) + ", C=" + std::to_string(ds.channels) +
                      ", N_c=" + std::to_string(ds.num_classes()) + ") does not match model (L=" +
                      std::to_string(cfg.signal_length) + ", C=" + std::to_string(cfg.channels) +
                      ", N_c=" + std::to_string(cfg.num_classes) + ")");
  }
}

template <typename T>
std::size_t argmax_row(const BasicTensor<T>& x, std::size_t r) {
  auto row = x.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct EpochStats {
  double loss = 0;
  double accuracy = 0;
};

/// One pass over `ds` in an order shuffled with `rng`; the final partial
/// batch is trained too. Loss and accuracy are sample-weighted means over
/// the training-mode forward passes.
inline EpochStats train_epoch(TsvitModel<float>& model, AdamState<float>& adam, const Dataset& ds,
                              const TrainConfig& cfg, Rng& rng) {
  check_compatible(model.config, ds);
  if (ds.size() == 0) throw DataError("train_epoch: empty dataset");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);

  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
    auto [batch, labels] = make_batch(ds, std::span(order).subspan(start, count));
    model.zero_grad();
    auto fwd = model_forward(batch, model, rng, true);
    auto loss = cross_entropy_loss<float>(fwd.logits, labels);
    model_backward(model, fwd.cache, loss.d_logits);
    adam_step(model, adam, cfg);
    loss_sum += loss.loss * static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) correct += argmax_row(fwd.logits, i) == labels[i];
  }
  return {loss_sum / static_cast<double>(ds.size()), static_cast<double>(correct) / static_cast<double>(ds.size())};
}

/// counts[true][predicted]
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts.at(truth * classes + pred); }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts.at(truth * classes + pred); }

  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < classes; ++i) t += at(i, i);
    return t;
  }
  std::uint64_t row_sum(std::size_t truth) const {
    std::uint64_t t = 0;
    for (std::size_t p = 0; p < classes; ++p) t += at(truth, p);
    return t;
  }
  double accuracy() const { return total() ? static_cast<double>(trace()) / static_cast<double>(total()) : 0.0; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  ConfusionMatrix confusion;
};

/// Inference-mode pass (dropout off) over `ds`; predictions are the argmax
/// of the class probabilities.
template <typename T>
EvalResult evaluate(const TsvitModel<T>& model, const Dataset& ds, std::size_t batch_size = 64) {
  check_compatible(model.config, ds);
  EvalResult res{0.0, 0.0, ConfusionMatrix(model.config.num_classes)};
  Rng unused(0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, ds.size() - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    auto [batch, labels] = make_batch(ds, idx);
    auto fwd = model_forward(batch.template cast<T>(), model, unused, false);
    res.loss += cross_entropy_loss<T>(fwd.logits, labels).loss * static_cast<double>(count);
    auto probs = predict_proba(fwd.logits);
    for (std::size_t i = 0; i < count; ++i) ++res.confusion.at(labels[i], argmax_row(probs, i));
  }
  if (ds.size()) res.loss /= static_cast<double>(ds.size());
  res.accuracy = res.confusion.accuracy();
  return res;
}

// ---------------------------------------------------------------------------
// Repeated trials

struct EpochRecord {
  std::uint32_t trial = 0;
  std::uint32_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0, test_loss = 0, test_acc = 0;
};

struct TrialReport {
  std::vector<EpochRecord> epochs;
  std::uint32_t best_epoch = 0;
  double best_accuracy = -1.0;
  ConfusionMatrix confusion;  // best model on the test set
  TsvitModel<float> best_model;
};

struct SweepReport {
  double max_acc = 0, min_acc = 0, avg_acc = 0;
};

/// Max/Min/Avg over trial accuracies. The mean is taken over the sorted
/// values so the result does not depend on trial order.
inline SweepReport summarize(std::span<const double> accuracies) {
  if (accuracies.empty()) throw ContractError("summarize: no trials");
  std::vector<double> sorted(accuracies.begin(), accuracies.end());
  std::sort(sorted.begin(), sorted.end());
  const double sum = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  SweepReport r{sorted.back(), sorted.front(), sum / static_cast<double>(sorted.size())};
  r.avg_acc = std::clamp(r.avg_acc, r.min_acc, r.max_acc);
  return r;
}

struct SweepResult {
  SweepReport summary;
  std::vector<TrialReport> trials;
};

using EpochObserver = std::function<void(const EpochRecord&)>;

/// Trial k is seeded with seed + k, freshly initialized and trained for
/// cfg.epochs epochs. The best model of a trial is the epoch with the highest
/// test accuracy (earliest on ties).
inline TrialReport run_trial(const Dataset& train, const Dataset& test, const TsvitConfig& model_cfg,
                             const TrainConfig& cfg, std::uint32_t trial, const EpochObserver& observer = {}) {
  cfg.validate();
  Rng init_rng(cfg.seed + trial);
  TsvitModel<float> model = init_model<float>(model_cfg, init_rng);
  Rng train_rng = Rng(cfg.seed + trial).derive(1);
  auto adam = AdamState<float>::for_model(model);
  TrialReport report;
  for (std::uint32_t e = 1; e <= cfg.epochs; ++e) {
    const EpochStats stats = train_epoch(model, adam, train, cfg, train_rng);
    EvalResult ev = evaluate(model, test);
    EpochRecord rec{trial, e, stats.loss, stats.accuracy, ev.loss, ev.accuracy};
    report.epochs.push_back(rec);
    if (observer) observer(rec);
    if (ev.accuracy > report.best_accuracy) {
      report.best_accuracy = ev.accuracy;
      report.best_epoch = e;
      report.confusion = ev.confusion;
      report.best_model = model;
    }
  }
  report.best_model.zero_grad();
  return report;
}

inline SweepResult run_trials(const Dataset& train, const Dataset& test, const TsvitConfig& model_cfg,
                              const TrainConfig& cfg, const EpochObserver& observer = {}) {
  cfg.validate();
  check_compatible(model_cfg, train);
  check_compatible(model_cfg, test);
  SweepResult res;
  std::vector<double> acc;
  for (std::uint32_t t = 0; t < cfg.trials; ++t) {
    res.trials.push_back(run_trial(train, test, model_cfg, cfg, t, observer));
    acc.push_back(res.trials.back().best_accuracy);
  }
  res.summary = summarize(acc);
  return res;
}

// ---------------------------------------------------------------------------
// Text outputs

inline std::string metrics_csv_header() { return "trial,epoch,train_loss,train_acc,test_loss,test_acc\n"; }

inline std::string metrics_csv_row(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%u,%u,%.6f,%.6f,%.6f,%.6f\n", r.trial, r.epoch, r.train_loss, r.train_acc,
                r.test_loss, r.test_acc);
  return buf;
}

/// Class-name header line, then one row of integer counts per true class.
inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  std::string out;
  for (std::size_t i = 0; i < class_names.size(); ++i) out += (i ? "," : "") + class_names[i];
  out += '\n';
  for (std::size_t t = 0; t < cm.classes; ++t) {
    for (std::size_t p = 0; p < cm.classes; ++p) out += (p ? "," : "") + std::to_string(cm.at(t, p));
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature export
//
// TSVF (little-endian): "TSVF" | u32 version=1 | u32 num_records | u32 m |
// u32 B | per record: u32 sample_index, u32 label, u8 layer_index,
// m float32 values.

inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureRecord {
  std::uint32_t sample_index = 0;
  std::uint32_t label = 0;
  std::uint8_t layer = 0;  // 0 = embedding layer, 1..B = block outputs
  std::vector<float> values;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureFile {
  std::uint32_t dim = 0;
  std::uint32_t blocks = 0;
  std::vector<FeatureRecord> records;

  friend bool operator==(const FeatureFile&, const FeatureFile&) = default;
};

/// Per sample (dropout off): layer 0 is the mean over all rows of the
/// embedding-layer output (class token plus patch embeddings); layer l is
/// the class-token row of block l's output.
inline FeatureFile extract_features(const TsvitModel<float>& model, const Dataset& ds, std::size_t batch_size = 64) {
  check_compatible(model.config, ds);
  if (model.config.blocks > 255) throw ConfigError("feature export supports at most 255 blocks");
  const std::size_t s = model.config.seq_len(), m = model.config.embed_dim;
  FeatureFile out{model.config.embed_dim, model.config.blocks, {}};
  out.records.reserve(ds.size() * (model.config.blocks + 1));
  Rng unused(0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, ds.size() - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    auto [batch, labels] = make_batch(ds, idx);
    auto emb = embed(batch, model, unused, false);
    auto enc = encoder_forward(emb.tokens, model, unused, false);
    for (std::size_t b = 0; b < count; ++b) {
      const auto sample = static_cast<std::uint32_t>(start + b);
      FeatureRecord rec{sample, labels[b], 0, std::vector<float>(m)};
      for (std::size_t r = 0; r < s; ++r) {
        auto row = emb.tokens.row(b * s + r);
        for (std::size_t c = 0; c < m; ++c) rec.values[c] += row[c];
      }
      for (auto& v : rec.values) v /= static_cast<float>(s);
      out.records.push_back(std::move(rec));
      for (std::size_t l = 0; l < enc.block_outputs.size(); ++l) {
        auto row = enc.block_outputs[l].row(b * s);
        out.records.push_back({sample, labels[b], static_cast<std::uint8_t>(l + 1), {row.begin(), row.end()}});
      }
    }
  }
  return out;
}

inline void write_features(const FeatureFile& f, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes("TSVF");
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(f.records.size()));
  w.u32(f.dim);
  w.u32(f.blocks);
  for (const auto& r : f.records) {
    if (r.values.size() != f.dim) throw DimensionError("feature record width does not match m");
    w.u32(r.sample_index);
    w.u32(r.label);
    w.u8(r.layer);
    w.f32s(r.values);
  }
  w.save(path);
}

inline FeatureFile read_features(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  r.expect_magic("TSVF");
  const auto version = r.u32();
  if (version != kFeatureVersion) {
    throw FormatError(FormatError::Kind::bad_version, r.source() + ": unsupported feature file version " + std::to_string(version));
  }
  FeatureFile f;
  const std::uint32_t count = r.u32();
  f.dim = r.u32();
  f.blocks = r.u32();
  if (r.remaining() < std::uint64_t{count} * (9 + std::uint64_t{f.dim} * 4)) {
    throw FormatError(FormatError::Kind::truncated, r.source() + ": feature payload is short");
  }
  f.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.sample_index = r.u32();
    rec.label = r.u32();
    rec.layer = r.u8();
    rec.values.resize(f.dim);
    r.f32s(rec.values);
    f.records.push_back(std::move(rec));
  }
  r.expect_end();
  return f;
}

inline void export_features(const TsvitModel<float>& model, const Dataset& ds, const std::filesystem::path& path) {
  write_features(extract_features(model, ds), path);
}

}  // namespace tsvit
