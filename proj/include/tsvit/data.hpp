#pragma once

// Labeled signal windows: segmentation, stratified splits, the TSVD file
// format and a synthetic four-class vibration generator.
//
// TSVD (little-endian): "TSVD" | u32 version=1 | u32 num_samples | u32 L |
// u32 C | u32 N_c | N_c x (u16 length + UTF-8 class name) |
// per sample: u32 label, L*C float32 values, channel-minor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsvit/binary_io.hpp"
#include "tsvit/rng.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

struct Sample {
  Tensor signal;  // [L x C]
  std::uint32_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  std::uint32_t length = 0;    // L
  std::uint32_t channels = 1;  // C

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  void validate() const {
    if (length == 0 || channels == 0) throw DataError("dataset: L and C must be >= 1");
    if (class_names.empty()) throw DataError("dataset: no classes");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.signal.shape() != Shape{length, channels}) {
        throw DataError("dataset: sample " + std::to_string(i) + " has shape " + shape_string(s.signal.shape()) +
                        ", expected " + shape_string({length, channels}));
      }
      if (s.label >= num_classes()) {
        throw DataError("dataset: sample " + std::to_string(i) + " has label " + std::to_string(s.label) +
                        " but only " + std::to_string(num_classes()) + " classes");
      }
    }
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes());
    for (const auto& s : samples) ++counts.at(s.label);
    return counts;
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{{}, class_names, length, channels};
    out.samples.reserve(indices.size());
    for (auto i : indices) out.samples.push_back(samples.at(i));
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Stacks the selected samples into [count x L x C] plus their labels.
inline std::pair<Tensor, std::vector<std::uint32_t>> make_batch(const Dataset& ds,
                                                                 std::span<const std::size_t> indices) {
  const std::size_t per = std::size_t{ds.length} * ds.channels;
  Tensor batch({indices.size(), ds.length, ds.channels});
  std::vector<std::uint32_t> labels;
  labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = ds.samples.at(indices[i]);
    std::copy_n(s.signal.raw(), per, batch.raw() + i * per);
    labels.push_back(s.label);
  }
  return {std::move(batch), std::move(labels)};
}

/// floor(T / width) consecutive non-overlapping windows; the tail is dropped.
inline std::vector<Tensor> sliding_window(const Tensor& signal, std::size_t width) {
  expect_matrix(signal, "sliding_window");
  if (width == 0) throw ConfigError("sliding_window: width must be >= 1");
  const std::size_t channels = signal.cols();
  std::vector<Tensor> windows;
  for (std::size_t start = 0; start + width <= signal.rows(); start += width) {
    auto first = signal.data().begin() + static_cast<std::ptrdiff_t>(start * channels);
    windows.emplace_back(Shape{width, channels}, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(width * channels)));
  }
  return windows;
}

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

/// Stratified split: each class is shuffled independently with a stream
/// derived from the seed, floor(count * train_fraction) samples go to train,
/// the rest to test. Output keeps class-major order.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("split: train fraction must be in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.samples[i].label).push_back(i);
  std::vector<std::size_t> train_idx, test_idx;
  const Rng base(spec.seed);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2) {
      throw DataError("split: class '" + ds.class_names[c] + "' has " + std::to_string(idx.size()) +
                      " samples, at least 2 are required");
    }
    Rng rng = base.derive(c);
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.index(i + 1)]);
    const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * spec.train_fraction + 1e-9));
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  }
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

/// Per-sample standardization to zero mean and unit variance (all channels
/// pooled). Off by default: the model is meant to consume raw signals.
inline void standardize(Dataset& ds) {
  for (auto& s : ds.samples) {
    double mean = 0, sq = 0;
    for (float v : s.signal.data()) mean += v;
    mean /= static_cast<double>(s.signal.size());
    for (float v : s.signal.data()) sq += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(s.signal.size()) + 1e-12);
    for (float& v : s.signal.data()) v = static_cast<float>((v - mean) * inv);
  }
}

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string encode_dataset(const Dataset& ds) {
  ds.validate();
  io::Writer w;
  w.bytes("TSVD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(ds.length);
  w.u32(ds.channels);
  w.u32(static_cast<std::uint32_t>(ds.num_classes()));
  for (const auto& name : ds.class_names) {
    if (name.size() > UINT16_MAX) throw DataError("dataset: class name longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
  }
  for (const auto& s : ds.samples) {
    w.u32(s.label);
    w.f32s(s.signal.data());
  }
  return w.buffer();
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes(encode_dataset(ds));
  w.save(path);
}

inline Dataset decode_dataset(io::Reader& r) {
  r.expect_magic("TSVD");
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::bad_version, r.source() + ": unsupported dataset version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Dataset ds;
  ds.length = r.u32();
  ds.channels = r.u32();
  const std::uint32_t classes = r.u32();
  if (ds.length == 0 || ds.channels == 0 || classes == 0) {
    throw FormatError(FormatError::Kind::invalid_value, r.source() + ": L, C and N_c must be >= 1");
  }
  for (std::uint32_t c = 0; c < classes; ++c) ds.class_names.push_back(r.bytes(r.u16()));
  const std::uint64_t per = std::uint64_t{ds.length} * ds.channels;
  if (r.remaining() < count * (4 + per * 4)) {
    throw FormatError(FormatError::Kind::truncated, r.source() + ": header announces " + std::to_string(count) +
                                                        " samples of " + std::to_string(ds.length) + "x" +
                                                        std::to_string(ds.channels) + " but the payload is short");
  }
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s{Tensor({ds.length, ds.channels}), r.u32()};
    if (s.label >= classes) {
      throw FormatError(FormatError::Kind::invalid_value,
                        r.source() + ": sample " + std::to_string(i) + " has out-of-range label " + std::to_string(s.label));
    }
    r.f32s(s.signal.data());
    ds.samples.push_back(std::move(s));
  }
  r.expect_end();
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  return decode_dataset(r);
}

// ---------------------------------------------------------------------------
// Synthetic vibration classes

inline constexpr double kSynthSampleRate = 1280.0;  // Hz
inline constexpr double kSynthBaseFreq = 50.0;      // Hz
inline constexpr double kSynthSnrDb = 10.0;

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"normal", "third_harmonic", "modulated", "second_harmonic"};
  return names;
}

/// Four classes built on a 50 Hz tone sampled at 1280 Hz:
///   0 tone; 1 tone + 3rd harmonic; 2 amplitude-modulated tone (10 Hz
///   envelope, looseness-like); 3 tone + strong 2x component (unbalance-like).
/// Every amplitude is jittered by +-20%, every component gets a random phase,
/// and white Gaussian noise is added at 10 dB SNR. Single channel.
inline Dataset gen_synthetic(std::size_t n_per_class, std::uint32_t length, std::uint64_t seed) {
  if (length == 0) throw ConfigError("gen_synthetic: length must be >= 1");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Dataset ds{{}, synthetic_class_names(), length, 1};
  Rng rng(seed);
  std::vector<double> clean(length);
  for (std::uint32_t label = 0; label < 4; ++label) {
    for (std::size_t k = 0; k < n_per_class; ++k) {
      auto jitter = [&] { return rng.uniform(0.8, 1.2); };
      auto phase = [&] { return rng.uniform(0.0, two_pi); };
      const double amp = jitter();
      const double ph = phase();
      const double amp2 = jitter(), ph2 = phase();
      for (std::uint32_t i = 0; i < length; ++i) {
        const double t = i / kSynthSampleRate;
        const double tone = amp * std::sin(two_pi * kSynthBaseFreq * t + ph);
        switch (label) {
          case 0: clean[i] = tone; break;
          case 1: clean[i] = tone + 0.6 * amp2 * std::sin(two_pi * 3.0 * kSynthBaseFreq * t + ph2); break;
          case 2: clean[i] = tone * (1.0 + 0.8 * amp2 * std::sin(two_pi * 10.0 * t + ph2)); break;
          default: clean[i] = tone + 0.8 * amp2 * std::sin(two_pi * 2.0 * kSynthBaseFreq * t + ph2); break;
        }
      }
      double power = 0;
      for (double v : clean) power += v * v;
      power /= length;
      const double noise_sd = std::sqrt(power / std::pow(10.0, kSynthSnrDb / 10.0));
      Sample s{Tensor({length, 1}), label};
      for (std::uint32_t i = 0; i < length; ++i) s.signal[i] = static_cast<float>(clean[i] + noise_sd * rng.normal());
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace tsvit
