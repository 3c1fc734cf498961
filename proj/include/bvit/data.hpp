#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bvit/tensor.hpp"

namespace bvit {

// Missing, unreadable or malformed dataset input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Images as float planes in [0, 1] (or standardized), CHW per image.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 0;
  std::vector<float> pixels;  // size() * channels * height * width
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_floats() const noexcept { return channels * height * width; }
  std::span<const float> image(std::size_t i) const noexcept {
    return {pixels.data() + i * image_floats(), image_floats()};
  }

  // Gathers the given examples into a [B x C x H x W] tensor.
  template <typename T>
  Tensor<T> batch_images(std::span<const std::size_t> indices) const {
    Tensor<T> out({indices.size(), channels, height, width});
    const std::size_t n = image_floats();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const float* src = pixels.data() + indices[b] * n;
      for (std::size_t i = 0; i < n; ++i) out[b * n + i] = static_cast<T>(src[i]);
    }
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) out[b] = labels[indices[b]];
    return out;
  }
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarTrainRecords = 50000;
inline constexpr std::size_t kCifarTestRecords = 10000;

struct Cifar100Record {
  std::uint8_t coarse_label = 0;
  std::uint8_t fine_label = 0;
  std::span<const std::uint8_t> pixels;  // 3072 bytes: R, G, B planes of 32x32
};

// Parses one 3074-byte record; throws DataError on bad length or labels.
Cifar100Record parse_cifar100_record(std::span<const std::uint8_t> bytes);

// Decodes a whole binary file image; expected_records = 0 accepts any count.
Dataset decode_cifar100(std::span<const std::uint8_t> bytes, std::size_t expected_records, bool standardize,
                        const std::string& what);

// Reads train.bin and test.bin from dir (the standard binary release).
DatasetSplit load_cifar100(const std::filesystem::path& dir, bool standardize = false);

// Per-channel standardization using the statistics of `reference`.
void standardize_channels(Dataset& ds, const Dataset& reference);

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t train = 512;
  std::size_t val = 128;
  std::size_t image_size = 32;
  std::uint64_t seed = 7;
  double noise = 0.1;
  bool standardize = true;  // per-channel, with train-split statistics

  // Parses "classes=4,train=512,val=128,seed=7[,size=32][,noise=0.1][,standardize=1]".
  static SyntheticSpec parse(const std::string& text);
  std::string to_string() const;
};

// Oriented sinusoidal gratings, one orientation per class, with random
// frequency, phase and channel gains plus Gaussian noise. Labels are exactly
// balanced in both splits.
DatasetSplit gen_synthetic(const SyntheticSpec& spec);

// Random horizontal flip and random crop with zero padding, in place.
void augment_batch(Tensor<float>& images, Rng& rng, std::size_t pad);
void augment_batch(Tensor<double>& images, Rng& rng, std::size_t pad);

}  // namespace bvit
