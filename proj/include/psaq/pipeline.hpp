#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "psaq/autodiff.hpp"
#include "psaq/data.hpp"
#include "psaq/optim.hpp"
#include "psaq/quantizer.hpp"
#include "psaq/vit.hpp"

namespace psaq {

// Which terms drive sample generation. NoiseOnly skips stage 1 and learns
// from (augmented) Gaussian noise.
enum class GenerationObjective : std::uint8_t { PseAndDiscrepancy, PseOnly, DiscrepancyOnly, NoiseOnly };
enum class Discrepancy : std::uint8_t { Mae, Kl };

const char* to_string(GenerationObjective o);
const char* to_string(Discrepancy d);

struct PipelineConfig {
  std::size_t iterations = 20;
  std::size_t g_step = 50;
  std::size_t q_step = 50;
  double lr_g = 0.2;
  double lr_q = 1e-4;
  double alpha = 1.0;
  std::size_t batch = 32;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int w_bits = 4;
  int a_bits = 8;
  Calibration calibration = Calibration::MinMax;
  double ema_momentum = QuantizedModel::kDefaultEmaMomentum;
  GenerationObjective objective = GenerationObjective::PseAndDiscrepancy;
  Discrepancy discrepancy = Discrepancy::Mae;
  double kl_temperature = 1.0;
  bool reset_pixel_adam = true;  // fresh pixel optimizer at every stage-1 entry
  bool record_timing = false;    // fill MetricsRecord::wall_ms (breaks byte-reproducibility)

  void validate() const;
  bool operator==(const PipelineConfig&) const = default;
};

class ConfigurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf loss inside a stage; carries the cycle and step where it happened.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(const std::string& stage, std::size_t cycle, std::size_t step);
  std::size_t cycle() const { return cycle_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t cycle_, step_;
};

struct FpModel {
  ViTParams params;
  ViTConfig config;
};

/// Synthetic input batch; pixels are unconstrained reals.
struct GeneratedBatch {
  ad::Tensor pixels;  // [B, C, S, S]
};

// i.i.d. N(0, 1) pixels from CounterRng(seed, stream 0).
GeneratedBatch init_noise(const ViTConfig& config, std::size_t batch, std::uint64_t seed);

struct AugmentOptions {
  double crop_min = 0.5;  // crop area fraction ~ U(crop_min, crop_max)
  double crop_max = 1.0;
  double flip_p = 0.5;
  bool jitter = true;  // per-channel gain U(0.6, 1.4), offset U(-0.2, 0.2)
  double blur_p = 0.5;  // 3x3 Gaussian, sigma ~ U(0.1, 1.0)

  static AugmentOptions identity() { return {1.0, 1.0, 0.0, false, 0.0}; }
};

// Crop+resize (bilinear), horizontal flip, color jitter, Gaussian blur, in
// that order, independently per image. Every image draws the same number
// of random values whatever the options, so the stream is stable.
GeneratedBatch augment(const GeneratedBatch& g, std::uint64_t seed, const AugmentOptions& options = {});

struct MetricsRecord {
  std::size_t cycle = 0;
  char stage = 'G';  // 'G' sample generation, 'Q' quantization learning
  std::size_t step = 0;
  std::optional<double> loss_pse, loss_d, loss_g, loss_q;
  std::optional<double> wall_ms;
};

// Stage 1: g_step Adam updates of the pixels minimizing L_G. Both models
// are read-only (the student in frozen-calibration mode).
GeneratedBatch stage1_generate(const FpModel& teacher, QuantizedModel& student, GeneratedBatch g,
                               const PipelineConfig& config, std::size_t cycle = 0,
                               std::vector<MetricsRecord>* metrics = nullptr, AdamState* pixel_state = nullptr);

// Stage 2: q_step updates of the student's shadow weights on fresh
// augmentations of `g`, recalibrating clipping values every step.
void stage2_learn(const FpModel& teacher, QuantizedModel& student, const GeneratedBatch& g,
                  const PipelineConfig& config, AdamState& state, std::size_t cycle = 0,
                  std::vector<MetricsRecord>* metrics = nullptr);

// build_quantized followed by one calibrating forward on init_noise(seed).
QuantizedModel minmax_baseline(const FpModel& student_fp, const PipelineConfig& config);

struct PipelineResult {
  QuantizedModel model;
  std::vector<MetricsRecord> metrics;
  GeneratedBatch samples;  // final generated batch
  std::size_t samples_consumed = 0;
};

// Full two-stage cycle. `student_fp` defaults to the teacher; a different
// architecture is allowed as long as the logit length matches.
PipelineResult run_pipeline(const FpModel& teacher, const PipelineConfig& config, const FpModel* student_fp = nullptr);

using Classifier = std::function<ad::Tensor(const ad::Tensor& images)>;

// Top-1 accuracy over the dataset, evaluated in chunks of `batch`.
double evaluate(const Classifier& model, const SyntheticDataset& data, std::size_t batch = 200);
double evaluate(const FpModel& model, const SyntheticDataset& data);
double evaluate(QuantizedModel& model, const SyntheticDataset& data);

}  // namespace psaq
