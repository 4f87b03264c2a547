#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "psaq/autodiff.hpp"

namespace psaq {

// Class-conditional Gaussian blobs: class c puts a blob in quadrant c % 4
// colored mostly in channel c % channels, plus i.i.d. pixel noise.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double noise = 0.1;
  double amplitude = 1.0;    // peak of the class-colored channel
  double off_channel = 0.25;  // fraction of the peak in the other channels
  std::size_t train_size = 2000;
  std::size_t test_size = 400;
};

struct SyntheticDataset {
  ad::Tensor images;  // [n, C, S, S]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  // Rows [begin, begin + count) as a new tensor.
  ad::Tensor slice(std::size_t begin, std::size_t count) const;
  ad::Tensor gather(std::span<const std::size_t> rows) const;
};

struct SyntheticSplit {
  SyntheticDataset train;
  SyntheticDataset test;
};

// Deterministic in (spec, seed). Train and test come from disjoint RNG
// streams; labels cycle through the classes so counts are balanced
// whenever the split size is a multiple of the class count.
SyntheticSplit make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

SyntheticDataset make_synthetic_split(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t split_id,
                                      std::size_t n);

}  // namespace psaq
