#include "psaq/data.hpp"

#include <algorithm>
#include <cmath>

#include "psaq/rng.hpp"

namespace psaq {

ad::Tensor SyntheticDataset::slice(std::size_t begin, std::size_t count) const {
  if (count == 0 || begin + count > size()) throw ContractError("dataset slice out of range");
  ad::Shape shape = images.shape();
  const std::size_t row = images.numel() / shape[0];
  shape[0] = count;
  auto first = images.vec().begin() + static_cast<std::ptrdiff_t>(begin * row);
  return ad::Tensor(shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * row)));
}

ad::Tensor SyntheticDataset::gather(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw ContractError("dataset gather: no rows");
  ad::Shape shape = images.shape();
  const std::size_t row = images.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<double> out;
  out.reserve(rows.size() * row);
  for (auto r : rows) {
    if (r >= size()) throw ContractError("dataset gather: row out of range");
    auto first = images.vec().begin() + static_cast<std::ptrdiff_t>(r * row);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(row));
  }
  return ad::Tensor(shape, std::move(out));
}

SyntheticDataset make_synthetic_split(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t split_id,
                                      std::size_t n) {
  if (spec.classes == 0 || spec.channels == 0 || spec.image_size < 4 || n == 0) {
    throw ContractError("make_synthetic: empty or degenerate spec");
  }
  const std::size_t s = spec.image_size, c = spec.channels;
  const double sd = static_cast<double>(s);
  SyntheticDataset ds;
  ds.images = ad::Tensor({n, c, s, s});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(seed, (split_id << 40) | i);
    const std::size_t label = i % spec.classes;
    ds.labels[i] = static_cast<int>(label);
    const std::size_t quadrant = label % 4;
    const double cy = sd * (quadrant / 2 == 0 ? 0.25 : 0.75) + rng.uniform(-sd / 8, sd / 8);
    const double cx = sd * (quadrant % 2 == 0 ? 0.25 : 0.75) + rng.uniform(-sd / 8, sd / 8);
    const double sigma = sd / 8 * rng.uniform(0.8, 1.2);
    const std::size_t hue = (label + label / 4) % c;
    double* img = ds.images.data().data() + i * c * s * s;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double amp = spec.amplitude * (ch == hue ? 1.0 : spec.off_channel);
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          const double blob = amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          img[(ch * s + y) * s + x] = blob + spec.noise * rng.normal();
        }
      }
    }
  }
  return ds;
}

SyntheticSplit make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  return {make_synthetic_split(spec, seed, 1, spec.train_size), make_synthetic_split(spec, seed, 2, spec.test_size)};
}

}  // namespace psaq
