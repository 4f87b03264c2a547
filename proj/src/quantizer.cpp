#include "psaq/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace psaq {

using ad::Tensor;

const char* to_string(Scheme s) { return s == Scheme::Symmetric ? "symmetric" : "asymmetric"; }
const char* to_string(Calibration c) { return c == Calibration::MinMax ? "minmax" : "ema"; }

QuantParams QuantParams::make(int bits, QuantRange range, Scheme scheme) {
  if (bits < 1 || bits > 16) throw ContractError("quantizer bit-width must be in [1, 16], got " + std::to_string(bits));
  if (!std::isfinite(range.lo) || !std::isfinite(range.hi) || !(range.hi > range.lo)) {
    throw ContractError("quantizer range must be finite with qmax > q0");
  }
  if (scheme == Scheme::Symmetric && range.lo != -range.hi) {
    throw ContractError("symmetric quantizer requires q0 == -qmax");
  }
  QuantParams qp;
  qp.bits = bits;
  qp.q0 = range.lo;
  qp.qmax = range.hi;
  qp.scheme = scheme;
  qp.delta = (range.hi - range.lo) / static_cast<double>(qp.max_level());
  return qp;
}

std::int32_t quantize_value(double x, const QuantParams& qp) {
  const double c = std::clamp(x, qp.q0, qp.qmax);
  // nearbyint honours the default round-to-nearest-even mode.
  const double q = std::nearbyint((c - qp.q0) / qp.delta);
  return static_cast<std::int32_t>(std::clamp(q, 0.0, static_cast<double>(qp.max_level())));
}

double dequantize_value(std::int32_t q, const QuantParams& qp) {
  if (q < 0 || q > qp.max_level()) throw ContractError("dequantize: level " + std::to_string(q) + " out of range");
  return static_cast<double>(q) * qp.delta + qp.q0;
}

IntTensor quantize(const Tensor& x, const QuantParams& qp) {
  IntTensor out{x.shape(), std::vector<std::int32_t>(x.numel())};
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = quantize_value(x[i], qp);
  return out;
}

Tensor dequantize(const IntTensor& q, const QuantParams& qp) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.data.size(); ++i) out[i] = dequantize_value(q.data[i], qp);
  return out;
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = dequantize_value(quantize_value(x[i], qp), qp);
  if (!ad::should_record({&x})) return out;
  std::vector<unsigned char> pass(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) pass[i] = x[i] >= qp.q0 && x[i] <= qp.qmax;
  const int xn = x.node();
  return ad::Tape::active()->record(std::move(out), [xn, pass = std::move(pass)](std::span<const double> g, ad::GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pass[i]) gx[i] += g[i];
    }
  });
}

QuantRange calibrate_minmax(const Tensor& x, Scheme scheme) {
  if (x.numel() == 0) throw ContractError("calibrate_minmax: empty tensor");
  QuantRange r;
  if (scheme == Scheme::Asymmetric) {
    auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    r = {*lo, *hi};
  } else {
    double m = 0.0;
    for (double v : x.data()) m = std::max(m, std::fabs(v));
    r = {-m, m};
  }
  if (!(r.hi > r.lo)) {
    r.lo -= kDegenerateWidening;
    r.hi += kDegenerateWidening;
  }
  return r;
}

QuantRange calibrate_ema(const std::optional<QuantRange>& prev, const QuantRange& observed, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("calibrate_ema: momentum must be in [0, 1)");
  if (!prev) return observed;
  return {momentum * prev->lo + (1.0 - momentum) * observed.lo, momentum * prev->hi + (1.0 - momentum) * observed.hi};
}

double model_size_mb(double param_count, int bits) {
  if (param_count < 0 || bits < 0) throw ContractError("model_size_mb: negative input");
  return param_count * static_cast<double>(bits) / 8.0 / 1e6;
}

// ---- QuantizedModel ------------------------------------------------------

QuantizedModel::QuantizedModel(ViTParams shadow, ViTConfig config, int w_bits, int a_bits, Calibration calibration,
                               double ema_momentum)
    : shadow_(std::move(shadow)),
      config_(config),
      w_bits_(w_bits),
      a_bits_(a_bits),
      calibration_(calibration),
      ema_momentum_(ema_momentum) {
  if (w_bits < 1 || w_bits > 16 || a_bits < 1 || a_bits > 16) {
    throw ContractError("bit-widths must be in [1, 16]");
  }
  if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw ContractError("EMA momentum must be in [0, 1)");
  config_.validate();
  shadow_.validate(config_);
  act_q_.resize(site::count(config_.blocks));
  recalibrate_weights();
}

void QuantizedModel::recalibrate_weights() {
  for (const auto& [name, t] : std::as_const(shadow_).named()) {
    if (!is_matmul_weight(name)) continue;
    weight_q_.insert_or_assign(name, QuantParams::make(w_bits_, calibrate_minmax(*t, Scheme::Symmetric), Scheme::Symmetric));
  }
}

void QuantizedModel::set_weight_quantizer(const std::string& name, const QuantParams& qp) {
  if (!weight_q_.count(name)) throw ContractError("no weight quantizer named " + name);
  weight_q_[name] = qp;
}

void QuantizedModel::set_activation_quantizer(std::size_t s, const ActivationQuantizer& aq) {
  if (s >= act_q_.size()) throw ContractError("activation site out of range");
  act_q_[s] = aq;
}

ForwardResult QuantizedModel::forward(const Tensor& image, Mode mode, bool capture_hooks, const ViTParams* weights) {
  mode_ = mode;
  return model_forward(image, weights ? *weights : shadow_, config_, capture_hooks, this);
}

ViTParams QuantizedModel::dequantized_weights() const {
  ViTParams out = shadow_;
  for (auto& [name, t] : out.named()) {
    auto it = weight_q_.find(name);
    if (it != weight_q_.end()) {
      ad::Tape::Pause pause;
      *t = fake_quant(t->detach(), it->second);
    }
  }
  return out;
}

Tensor QuantizedModel::weight(const std::string& name, const Tensor& w) {
  auto it = weight_q_.find(name);
  if (it == weight_q_.end()) throw ContractError("no weight quantizer named " + name);
  return fake_quant(w, it->second);
}

Tensor QuantizedModel::activation(std::size_t s, const Tensor& x) {
  auto& aq = act_q_.at(s);
  if (mode_ == Mode::Calibrate || !aq.params) {
    const QuantRange observed = calibrate_minmax(x, Scheme::Asymmetric);
    aq.range = calibration_ == Calibration::Ema ? calibrate_ema(aq.range, observed, ema_momentum_) : observed;
    aq.params = QuantParams::make(a_bits_, *aq.range, Scheme::Asymmetric);
  }
  return fake_quant(x, *aq.params);
}

QuantizedModel build_quantized(const ViTParams& fp, const ViTConfig& config, int w_bits, int a_bits,
                               Calibration calibration, double ema_momentum) {
  return QuantizedModel(fp, config, w_bits, a_bits, calibration, ema_momentum);
}

}  // namespace psaq
