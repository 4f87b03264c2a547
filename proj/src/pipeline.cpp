#include "psaq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "psaq/losses.hpp"
#include "psaq/rng.hpp"

namespace psaq {

using ad::Tensor;

const char* to_string(GenerationObjective o) {
  switch (o) {
    case GenerationObjective::PseAndDiscrepancy: return "pse+d";
    case GenerationObjective::PseOnly: return "pse";
    case GenerationObjective::DiscrepancyOnly: return "d";
    case GenerationObjective::NoiseOnly: return "noise";
  }
  return "?";
}

const char* to_string(Discrepancy d) { return d == Discrepancy::Mae ? "mae" : "kl"; }

void PipelineConfig::validate() const {
  if (batch < 1) throw ConfigurationError("pipeline.batch must be >= 1");
  if (!(lr_g >= 0) || !(lr_q >= 0)) throw ConfigurationError("learning rates must be non-negative");
  if (!(alpha >= 0)) throw ConfigurationError("pipeline.alpha must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigurationError("pipeline.weight_decay must be non-negative");
  if (w_bits < 1 || w_bits > 16 || a_bits < 1 || a_bits > 16) throw ConfigurationError("bit-widths must be in [1, 16]");
  if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ConfigurationError("quant.ema_momentum must be in [0, 1)");
  if (!(kl_temperature > 0)) throw ConfigurationError("pipeline.kl_temperature must be positive");
}

PipelineError::PipelineError(const std::string& stage, std::size_t cycle, std::size_t step)
    : std::runtime_error(stage + ": non-finite loss at cycle " + std::to_string(cycle) + ", step " +
                         std::to_string(step)),
      cycle_(cycle),
      step_(step) {}

GeneratedBatch init_noise(const ViTConfig& config, std::size_t batch, std::uint64_t seed) {
  if (batch == 0) throw ContractError("init_noise: batch must be positive");
  GeneratedBatch g{Tensor({batch, config.channels, config.image_size, config.image_size})};
  CounterRng rng(seed, 0);
  for (auto& v : g.pixels.data()) v = rng.normal();
  return g;
}

// ---- augmentation --------------------------------------------------------

namespace {

void crop_resize(const double* src, double* dst, std::size_t s, double side, double oy, double ox) {
  const double scale = side / static_cast<double>(s);
  const double last = static_cast<double>(s - 1);
  for (std::size_t y = 0; y < s; ++y) {
    const double sy = std::clamp(oy + (static_cast<double>(y) + 0.5) * scale - 0.5, 0.0, last);
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, s - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < s; ++x) {
      const double sx = std::clamp(ox + (static_cast<double>(x) + 0.5) * scale - 0.5, 0.0, last);
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, s - 1);
      const double fx = sx - static_cast<double>(x0);
      if (fx == 0.0 && fy == 0.0) {
        dst[y * s + x] = src[y0 * s + x0];
        continue;
      }
      const double top = src[y0 * s + x0] * (1 - fx) + src[y0 * s + x1] * fx;
      const double bot = src[y1 * s + x0] * (1 - fx) + src[y1 * s + x1] * fx;
      dst[y * s + x] = top * (1 - fy) + bot * fy;
    }
  }
}

void blur3(double* img, std::size_t s, double sigma) {
  const double w1 = std::exp(-0.5 / (sigma * sigma));
  const double k[3] = {w1 / (1 + 2 * w1), 1 / (1 + 2 * w1), w1 / (1 + 2 * w1)};
  std::vector<double> tmp(s * s);
  auto idx = [s](std::ptrdiff_t i) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(s) - 1)); };
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const auto xi = static_cast<std::ptrdiff_t>(x);
      tmp[y * s + x] = k[0] * img[y * s + idx(xi - 1)] + k[1] * img[y * s + x] + k[2] * img[y * s + idx(xi + 1)];
    }
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const auto yi = static_cast<std::ptrdiff_t>(y);
      img[y * s + x] = k[0] * tmp[idx(yi - 1) * s + x] + k[1] * tmp[y * s + x] + k[2] * tmp[idx(yi + 1) * s + x];
    }
}

}  // namespace

GeneratedBatch augment(const GeneratedBatch& g, std::uint64_t seed, const AugmentOptions& options) {
  const auto& px = g.pixels;
  if (px.rank() != 4 || px.dim(2) != px.dim(3)) throw DimensionError("augment: expected [B, C, S, S] pixels");
  if (!(options.crop_min > 0 && options.crop_min <= options.crop_max && options.crop_max <= 1)) {
    throw ContractError("augment: crop scale range must satisfy 0 < min <= max <= 1");
  }
  const std::size_t b = px.dim(0), c = px.dim(1), s = px.dim(2);
  GeneratedBatch out{Tensor(px.shape())};
  std::vector<double> plane(s * s);
  for (std::size_t i = 0; i < b; ++i) {
    CounterRng rng(seed, i);
    const double area = rng.uniform(options.crop_min, options.crop_max);
    const double side = static_cast<double>(s) * std::sqrt(area);
    const double oy = rng.uniform() * (static_cast<double>(s) - side);
    const double ox = rng.uniform() * (static_cast<double>(s) - side);
    const bool flip = rng.uniform() < options.flip_p;
    std::vector<double> gain(c), offset(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      gain[ch] = rng.uniform(0.6, 1.4);
      offset[ch] = rng.uniform(-0.2, 0.2);
    }
    const bool blur = rng.uniform() < options.blur_p;
    const double sigma = rng.uniform(0.1, 1.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = px.data().data() + (i * c + ch) * s * s;
      double* dst = out.pixels.data().data() + (i * c + ch) * s * s;
      crop_resize(src, plane.data(), s, side, oy, ox);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) dst[y * s + x] = plane[y * s + (flip ? s - 1 - x : x)];
      if (options.jitter) {
        for (std::size_t t = 0; t < s * s; ++t) dst[t] = dst[t] * gain[ch] + offset[ch];
      }
      if (blur) blur3(dst, s, sigma);
    }
  }
  return out;
}

// ---- stages --------------------------------------------------------------

namespace {

Tensor discrepancy(const PipelineConfig& config, const Tensor& o_q, const Tensor& o_p) {
  return config.discrepancy == Discrepancy::Mae ? discrepancy_mae(o_q, o_p)
                                                : kld_discrepancy(o_q, o_p, config.kl_temperature);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::uint64_t augment_seed(std::uint64_t seed, std::size_t cycle, std::size_t step) {
  return CounterRng::mix(seed ^ CounterRng::mix((static_cast<std::uint64_t>(cycle) << 32) ^ step ^ 0xA5A5000000000000ULL));
}

}  // namespace

GeneratedBatch stage1_generate(const FpModel& teacher, QuantizedModel& student, GeneratedBatch g,
                               const PipelineConfig& config, std::size_t cycle, std::vector<MetricsRecord>* metrics,
                               AdamState* pixel_state) {
  if (config.objective == GenerationObjective::NoiseOnly || config.g_step == 0) return g;
  AdamState local;
  AdamState& adam = pixel_state ? *pixel_state : local;
  if (config.reset_pixel_adam) adam.reset();
  const bool use_pse = config.objective != GenerationObjective::DiscrepancyOnly;
  const double alpha = config.objective == GenerationObjective::PseOnly ? 0.0 : config.alpha;
  const bool use_d = alpha != 0.0;
  ad::Tensor* slot = &g.pixels;

  for (std::size_t step = 0; step < config.g_step; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    Tensor x = tape.leaf(g.pixels.detach());
    ForwardResult tp = model_forward(x, teacher.params, teacher.config, true);

    Tensor pse, ld;
    if (use_pse) {
      pse = pse_loss(tp.hooks);
    } else {
      ad::Tape::Pause pause;
      pse = pse_loss(tp.hooks);
    }
    if (use_d) {
      ld = discrepancy(config, student.forward(x, QuantizedModel::Mode::Frozen).logits, tp.logits);
    } else {
      ad::Tape::Pause pause;
      ld = discrepancy(config, student.forward(x.detach(), QuantizedModel::Mode::Frozen).logits, tp.logits.detach());
    }

    Tensor loss;
    if (use_pse && use_d) {
      loss = generator_loss(pse, ld, alpha);
    } else if (use_pse) {
      loss = ad::scale(pse, -1.0);
    } else {
      loss = ad::scale(ld, -alpha);
    }
    if (!std::isfinite(loss.item())) throw PipelineError("sample generation", cycle, step);
    if (metrics) {
      const double lg = -(use_pse ? pse.item() : 0.0) - alpha * ld.item();
      metrics->push_back({cycle, 'G', step, pse.item(), ld.item(), lg, std::nullopt, std::nullopt});
    }
    if (use_pse || use_d) {
      auto grads = tape.backward(loss, {x});
      Tensor gx = grads.at(x);
      ad::Tape::Pause pause;
      adam_step(std::span(&slot, 1), std::span(&gx, 1), adam, config.lr_g, 0.0);
    }
    if (metrics && config.record_timing) metrics->back().wall_ms = elapsed_ms(t0);
  }
  return g;
}

void stage2_learn(const FpModel& teacher, QuantizedModel& student, const GeneratedBatch& g,
                  const PipelineConfig& config, AdamState& state, std::size_t cycle,
                  std::vector<MetricsRecord>* metrics) {
  std::vector<Tensor*> slots;
  for (auto& [name, t] : student.shadow().named()) slots.push_back(t);
  for (std::size_t step = 0; step < config.q_step; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    GeneratedBatch aug = augment(g, augment_seed(config.seed, cycle, step));
    Tensor o_p;
    {
      ad::Tape::Pause pause;
      o_p = model_forward(aug.pixels, teacher.params, teacher.config).logits;
    }
    student.recalibrate_weights();
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    ViTParams leaves = student.shadow().attach(tape);
    Tensor o_q = student.forward(aug.pixels, QuantizedModel::Mode::Calibrate, false, &leaves).logits;
    Tensor lq = discrepancy(config, o_q, o_p);
    if (!std::isfinite(lq.item())) throw PipelineError("quantization learning", cycle, step);
    std::vector<Tensor> leaf_list;
    for (const auto& [name, t] : std::as_const(leaves).named()) leaf_list.push_back(*t);
    auto grads = tape.backward(lq, leaf_list);
    std::vector<Tensor> gs;
    for (const auto& t : leaf_list) gs.push_back(grads.at(t));
    {
      ad::Tape::Pause pause;
      adam_step(slots, gs, state, config.lr_q, config.weight_decay);
    }
    if (metrics) {
      MetricsRecord r{cycle, 'Q', step, std::nullopt, lq.item(), std::nullopt, lq.item(), std::nullopt};
      if (config.record_timing) r.wall_ms = elapsed_ms(t0);
      metrics->push_back(r);
    }
  }
}

QuantizedModel minmax_baseline(const FpModel& student_fp, const PipelineConfig& config) {
  config.validate();
  QuantizedModel q = build_quantized(student_fp.params, student_fp.config, config.w_bits, config.a_bits,
                                     config.calibration, config.ema_momentum);
  ad::Tape::Pause pause;
  q.forward(init_noise(student_fp.config, config.batch, config.seed).pixels, QuantizedModel::Mode::Calibrate);
  return q;
}

PipelineResult run_pipeline(const FpModel& teacher, const PipelineConfig& config, const FpModel* student_fp) {
  config.validate();
  const FpModel& student = student_fp ? *student_fp : teacher;
  if (student.config.classes != teacher.config.classes) {
    throw ConfigurationError("teacher and student logit lengths differ (" + std::to_string(teacher.config.classes) +
                             " vs " + std::to_string(student.config.classes) + ")");
  }
  if (student.config.image_size != teacher.config.image_size || student.config.channels != teacher.config.channels) {
    throw ConfigurationError("teacher and student expect different input shapes");
  }
  PipelineResult r;
  r.model = minmax_baseline(student, config);
  r.samples = init_noise(student.config, config.batch, config.seed);
  AdamState q_state, pixel_state;
  for (std::size_t cycle = 0; cycle < config.iterations; ++cycle) {
    r.samples = stage1_generate(teacher, r.model, std::move(r.samples), config, cycle, &r.metrics, &pixel_state);
    stage2_learn(teacher, r.model, r.samples, config, q_state, cycle, &r.metrics);
    r.samples_consumed += config.q_step * config.batch;
  }
  if (config.iterations > 0) r.model.recalibrate_weights();
  return r;
}

// ---- evaluation ----------------------------------------------------------

double evaluate(const Classifier& model, const SyntheticDataset& data, std::size_t batch) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  ad::Tape::Pause pause;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); i += batch) {
    const std::size_t cnt = std::min(batch, data.size() - i);
    Tensor logits = model(data.slice(i, cnt));
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < cnt; ++r) {
      auto row = logits.data().subspan(r * k, k);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == data.labels[i + r];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate(const FpModel& model, const SyntheticDataset& data) {
  return evaluate([&](const Tensor& x) { return model_forward(x, model.params, model.config).logits; }, data);
}

double evaluate(QuantizedModel& model, const SyntheticDataset& data) {
  return evaluate([&](const Tensor& x) { return model.forward(x, QuantizedModel::Mode::Frozen).logits; }, data);
}

}  // namespace psaq
