#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psaq/autodiff.hpp"
#include "psaq/vit.hpp"

namespace psaq {

enum class Scheme : std::uint8_t { Symmetric = 0, Asymmetric = 1 };
enum class Calibration : std::uint8_t { MinMax = 0, Ema = 1 };

const char* to_string(Scheme s);
const char* to_string(Calibration c);

struct QuantRange {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const QuantRange&) const = default;
};

/// State of one uniform quantizer with 2^k levels spanning [q0, qmax].
struct QuantParams {
  int bits = 8;
  double q0 = 0.0;
  double qmax = 1.0;
  double delta = 1.0 / 255.0;  // (qmax - q0) / (2^k - 1)
  Scheme scheme = Scheme::Asymmetric;

  // Validates and derives delta. Throws ContractError if bits is outside
  // [1, 16], the range is empty or non-finite, or a symmetric range is not
  // centered on zero.
  static QuantParams make(int bits, QuantRange range, Scheme scheme);

  std::int32_t max_level() const { return (std::int32_t{1} << bits) - 1; }
  bool operator==(const QuantParams&) const = default;
};

struct IntTensor {
  ad::Shape shape;
  std::vector<std::int32_t> data;
};

// round((clip(x, q0, qmax) - q0) / delta), ties to even.
std::int32_t quantize_value(double x, const QuantParams& qp);
double dequantize_value(std::int32_t q, const QuantParams& qp);

IntTensor quantize(const ad::Tensor& x, const QuantParams& qp);
ad::Tensor dequantize(const IntTensor& q, const QuantParams& qp);

// Quantize-dequantize. Backward is the clipped straight-through estimator:
// gradient 1 where q0 <= x <= qmax, 0 elsewhere.
ad::Tensor fake_quant(const ad::Tensor& x, const QuantParams& qp);

inline constexpr double kDegenerateWidening = 1e-8;

// Asymmetric: (min, max). Symmetric: (-max|x|, max|x|). Empty or zero-width
// ranges are widened by kDegenerateWidening on each side.
QuantRange calibrate_minmax(const ad::Tensor& x, Scheme scheme);

// momentum * prev + (1 - momentum) * observed per endpoint; a missing
// previous range means the observation initializes the state.
QuantRange calibrate_ema(const std::optional<QuantRange>& prev, const QuantRange& observed, double momentum);

// Size in MB (10^6 bytes) of `param_count` weights stored at `bits` each.
double model_size_mb(double param_count, int bits);

// Activation quantizer at one matmul operand site.
struct ActivationQuantizer {
  std::optional<QuantRange> range;  // running (EMA) or last (MinMax) range
  std::optional<QuantParams> params;
  bool operator==(const ActivationQuantizer&) const = default;
};

/// Student model: full-precision shadow weights seen only through fake
/// quantization. Weights use symmetric per-tensor MinMax; activations use
/// asymmetric per-tensor ranges.
class QuantizedModel : public OperandQuantizer {
 public:
  enum class Mode {
    Frozen,     // use stored activation ranges (calibrating a site only on first use)
    Calibrate,  // update activation ranges from the current batch, then quantize
  };

  static constexpr double kDefaultEmaMomentum = 0.9;

  QuantizedModel() = default;
  QuantizedModel(ViTParams shadow, ViTConfig config, int w_bits, int a_bits,
                 Calibration calibration = Calibration::MinMax, double ema_momentum = kDefaultEmaMomentum);

  const ViTConfig& config() const { return config_; }
  const ViTParams& shadow() const { return shadow_; }
  ViTParams& shadow() { return shadow_; }
  int w_bits() const { return w_bits_; }
  int a_bits() const { return a_bits_; }
  Calibration calibration() const { return calibration_; }
  double ema_momentum() const { return ema_momentum_; }

  const std::map<std::string, QuantParams>& weight_quantizers() const { return weight_q_; }
  const std::vector<ActivationQuantizer>& activation_quantizers() const { return act_q_; }
  void set_weight_quantizer(const std::string& name, const QuantParams& qp);
  void set_activation_quantizer(std::size_t site, const ActivationQuantizer& aq);

  // MinMax-symmetric weight ranges from the current shadow weights.
  void recalibrate_weights();

  // Fake-quantized forward. `weights` overrides the shadow tensors (used to
  // pass tape leaves during learning); it must share the shadow layout.
  ForwardResult forward(const ad::Tensor& image, Mode mode = Mode::Frozen, bool capture_hooks = false,
                        const ViTParams* weights = nullptr);

  // Dequantized view of every weight tensor (matmul weights quantized,
  // everything else copied).
  ViTParams dequantized_weights() const;

  ad::Tensor weight(const std::string& name, const ad::Tensor& w) override;
  ad::Tensor activation(std::size_t site, const ad::Tensor& x) override;

 private:
  ViTParams shadow_;
  ViTConfig config_;
  int w_bits_ = 8;
  int a_bits_ = 8;
  Calibration calibration_ = Calibration::MinMax;
  double ema_momentum_ = kDefaultEmaMomentum;
  std::map<std::string, QuantParams> weight_q_;
  std::vector<ActivationQuantizer> act_q_;
  Mode mode_ = Mode::Frozen;
};

// Copies the FP weights into a new student and calibrates its weight
// quantizers; activation quantizers stay uninitialized until a forward.
QuantizedModel build_quantized(const ViTParams& fp, const ViTConfig& config, int w_bits, int a_bits,
                               Calibration calibration = Calibration::MinMax,
                               double ema_momentum = QuantizedModel::kDefaultEmaMomentum);

}  // namespace psaq
