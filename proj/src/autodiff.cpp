#include "psaq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace psaq::ad {

namespace {

thread_local Tape* g_active = nullptr;

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(const double* g, const double* b, double* da, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* dai = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      dai[p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(const double* a, const double* g, double* db, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += av * gi[j];
    }
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

// ---- tape ----------------------------------------------------------------

GradientSink::GradientSink(const Tape& tape) : tape_(&tape), buffers_(tape.size()) {}

std::span<double> GradientSink::grad(int node) {
  auto& buf = buffers_.at(static_cast<std::size_t>(node));
  if (buf.empty()) buf.assign(tape_->node_numel(node), 0.0);
  return buf;
}

const Tensor& Gradients::at(int node) const {
  auto it = grads_.find(node);
  if (it == grads_.end()) throw ContractError("no gradient requested for node " + std::to_string(node));
  return it->second;
}

Tape* Tape::active() { return g_active; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active) { g_active = &tape; }
Tape::Scope::~Scope() { g_active = previous_; }
Tape::Pause::Pause() : previous_(g_active) { g_active = nullptr; }
Tape::Pause::~Pause() { g_active = previous_; }

Tensor Tape::leaf(Tensor value) {
  Node n;
  n.shape = value.shape_;
  n.numel = value.numel();
  nodes_.push_back(std::move(n));
  value.node_ = static_cast<int>(nodes_.size() - 1);
  value.tape_ = this;
  return value;
}

Tensor Tape::record(Tensor output, BackwardFn backward) {
  Node n;
  n.shape = output.shape_;
  n.numel = output.numel();
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  output.node_ = static_cast<int>(nodes_.size() - 1);
  output.tape_ = this;
  return output;
}

Gradients Tape::backward(const Tensor& loss, std::span<const Tensor> leaves) const {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.tracked() || loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  GradientSink sink(*this);
  sink.grad(loss.node())[0] = 1.0;
  for (int id = loss.node(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || !sink.has(id)) continue;
    n.backward(sink.peek(id), sink);
  }
  Gradients out;
  for (const auto& leaf : leaves) {
    if (!leaf.tracked() || leaf.tape() != this) throw ContractError("backward: leaf is not on this tape");
    std::vector<double> g(leaf.numel(), 0.0);
    if (sink.has(leaf.node())) {
      auto src = sink.peek(leaf.node());
      std::copy(src.begin(), src.end(), g.begin());
    }
    out.grads_.insert_or_assign(leaf.node(), Tensor(leaf.shape(), std::move(g)));
  }
  return out;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return false;
  bool any = false;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (t->tape() != tape) throw ContractError("tensor belongs to a different tape than the active one");
    any = true;
  }
  return any;
}

// ---- matmul --------------------------------------------------------------

namespace {

struct MatmulPlan {
  std::size_t m = 0, k = 0, n = 0;
  Shape out_shape;
  std::vector<std::size_t> a_off, b_off;  // per output batch: element offsets
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  p.n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != p.k) {
    throw DimensionError("matmul inner dimension mismatch " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t ab = as.size() - 2, bb = bs.size() - 2;
  const std::size_t rb = std::max(ab, bb);
  Shape batch(rb, 1), ad(rb, 1), bd(rb, 1);
  for (std::size_t i = 0; i < ab; ++i) ad[rb - ab + i] = as[i];
  for (std::size_t i = 0; i < bb; ++i) bd[rb - bb + i] = bs[i];
  for (std::size_t i = 0; i < rb; ++i) {
    if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1) {
      throw DimensionError("matmul batch dims not broadcastable " + shape_str(as) + " x " + shape_str(bs));
    }
    batch[i] = std::max(ad[i], bd[i]);
  }
  std::vector<std::size_t> astr(rb, 0), bstr(rb, 0);
  std::size_t sa = p.m * p.k, sb = p.k * p.n;
  for (std::size_t i = rb; i-- > 0;) {
    astr[i] = ad[i] == 1 ? 0 : sa;
    bstr[i] = bd[i] == 1 ? 0 : sb;
    sa *= ad[i];
    sb *= bd[i];
  }
  const std::size_t nb = shape_numel(batch);
  p.a_off.resize(nb);
  p.b_off.resize(nb);
  std::vector<std::size_t> idx(rb, 0);
  for (std::size_t t = 0; t < nb; ++t) {
    std::size_t ao = 0, bo = 0;
    for (std::size_t i = 0; i < rb; ++i) {
      ao += idx[i] * astr[i];
      bo += idx[i] * bstr[i];
    }
    p.a_off[t] = ao;
    p.b_off[t] = bo;
    for (std::size_t i = rb; i-- > 0;) {
      if (++idx[i] < batch[i]) break;
      idx[i] = 0;
    }
  }
  p.out_shape = batch;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  return p;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto plan = plan_matmul(a.shape(), b.shape());
  Tensor out(plan.out_shape);
  const std::size_t mn = plan.m * plan.n;
  for (std::size_t t = 0; t < plan.a_off.size(); ++t) {
    gemm_nn(a.data().data() + plan.a_off[t], b.data().data() + plan.b_off[t],
            out.data().data() + t * mn, plan.m, plan.k, plan.n);
  }
  if (!should_record({&a, &b})) return out;
  const int an = a.node(), bn = b.node();
  return Tape::active()->record(
      std::move(out), [an, bn, av = a.vec(), bv = b.vec(), plan](std::span<const double> g, GradientSink& sink) {
        const std::size_t mn = plan.m * plan.n;
        if (an >= 0) {
          auto ga = sink.grad(an);
          for (std::size_t t = 0; t < plan.a_off.size(); ++t) {
            gemm_nt(g.data() + t * mn, bv.data() + plan.b_off[t], ga.data() + plan.a_off[t], plan.m,
                    plan.k, plan.n);
          }
        }
        if (bn >= 0) {
          auto gb = sink.grad(bn);
          for (std::size_t t = 0; t < plan.b_off.size(); ++t) {
            gemm_tn(av.data() + plan.a_off[t], g.data() + t * mn, gb.data() + plan.b_off[t], plan.m,
                    plan.k, plan.n);
          }
        }
      });
}

// ---- layout ops ----------------------------------------------------------

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  // map[out_linear] = in_linear
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(r, 0);
  const std::size_t last = out_shape[r - 1], last_stride = in_stride[axes[r - 1]];
  std::size_t src = 0;
  for (std::size_t t = 0; t < map.size(); t += last) {
    for (std::size_t j = 0; j < last; ++j) map[t + j] = src + j * last_stride;
    for (std::size_t i = r - 1; i-- > 0;) {
      src += in_stride[axes[i]];
      if (++idx[i] < out_shape[i]) break;
      src -= out_shape[i] * in_stride[axes[i]];
      idx[i] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t t = 0; t < map.size(); ++t) out[t] = x[map[t]];
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn, map = std::move(map)](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t t = 0; t < map.size(); ++t) gx[map[t]] += g[t];
  });
}

Tensor transpose_last(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.vec());
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw DimensionError("add: " + shape_str(bs) + " does not broadcast onto " + shape_str(as));
  }
  const std::size_t nb = b.numel();
  Tensor out(as, a.vec());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i % nb];
  if (!should_record({&a, &b})) return out;
  const int an = a.node(), bn = b.node();
  return Tape::active()->record(std::move(out), [an, bn, nb](std::span<const double> g, GradientSink& sink) {
    if (an >= 0) {
      auto ga = sink.grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn >= 0) {
      auto gb = sink.grad(bn);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.vec());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  if (!should_record({&a, &b})) return out;
  const int an = a.node(), bn = b.node();
  return Tape::active()->record(std::move(out), [an, bn](std::span<const double> g, GradientSink& sink) {
    if (an >= 0) {
      auto ga = sink.grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn >= 0) {
      auto gb = sink.grad(bn);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.vec());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  if (!should_record({&a, &b})) return out;
  const int an = a.node(), bn = b.node();
  return Tape::active()->record(
      std::move(out), [an, bn, av = a.vec(), bv = b.vec()](std::span<const double> g, GradientSink& sink) {
        if (an >= 0) {
          auto ga = sink.grad(an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (bn >= 0) {
          auto gb = sink.grad(bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape(), x.vec());
  for (auto& v : out.data()) v *= c;
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn, c](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

Tensor abs(const Tensor& x) {
  Tensor out(x.shape(), x.vec());
  for (auto& v : out.data()) v = std::fabs(v);
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn, xv = x.vec()](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    // Subgradient 0 at the kink.
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0 ? g[i] : (xv[i] < 0 ? -g[i] : 0.0);
  });
}

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = x.data().data() + (o * s.n + j) * s.inner;
      double* dst = out.data().data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out.data()) v *= inv;
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn, s, inv](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.n + j) * s.inner + i] += g[o * s.inner + i] * inv;
      }
    }
  });
}

// ---- nonlinearities ------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = x[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  }
  if (!should_record({&x})) return out;
  const int xn = x.node();
  std::vector<double> y = out.vec();
  return Tape::active()->record(std::move(out), [xn, s, y = std::move(y)](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t t = base + j * s.inner;
          gx[t] += y[t] * (g[t] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = x[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(x[base + j * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = x[base + j * s.inner] - lz;
    }
  }
  if (!should_record({&x})) return out;
  const int xn = x.node();
  std::vector<double> y = out.vec();
  return Tape::active()->record(std::move(out), [xn, s, y = std::move(y)](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double gs = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) gs += g[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t t = base + j * s.inner;
          gx[t] += g[t] - std::exp(y[t]) * gs;
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * normal_cdf(x[i]);
  if (!should_record({&x})) return out;
  const int xn = x.node();
  return Tape::active()->record(std::move(out), [xn, xv = x.vec()](std::span<const double> g, GradientSink& sink) {
    auto gx = sink.grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (normal_cdf(xv[i]) + xv[i] * normal_pdf(xv[i]));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  if (x.rank() < 1) throw DimensionError("layer_norm: rank 0 input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  if (!should_record({&x, &gamma, &beta})) return out;
  const int xn = x.node(), gn = gamma.node(), bn = beta.node();
  return Tape::active()->record(
      std::move(out), [xn, gn, bn, d, rows, xhat = std::move(xhat), rstd = std::move(rstd),
                       gv = gamma.vec()](std::span<const double> g, GradientSink& sink) {
        if (gn >= 0) {
          auto gg = sink.grad(gn);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (bn >= 0) {
          auto gb = sink.grad(bn);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (xn >= 0) {
          auto gx = sink.grad(xn);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              s1 += gh;
              s2 += gh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              gx[r * d + j] += rstd[r] * (gh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B, C]");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw DimensionError("cross_entropy: label count != batch");
  Tensor lp = log_softmax(logits, 1);
  Tensor mask({b, c});
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw ContractError("cross_entropy: label out of range");
    mask[i * c + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(b);
  }
  return sum(mul(lp, mask));
}

}  // namespace psaq::ad
