#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace psaq {

/// Thrown when tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller violates a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace psaq

namespace psaq::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;

// Dense row-major float64 array. A tensor produced while a Tape is active
// carries the id of the tape node that produced it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double item() const;

  int node() const { return node_; }
  bool tracked() const { return node_ >= 0; }
  const Tape* tape() const { return tape_; }

  // Same values, no tape attachment.
  Tensor detach() const { return Tensor(shape_, data_); }

 private:
  friend class Tape;
  Shape shape_;
  std::vector<double> data_;
  int node_ = -1;
  const Tape* tape_ = nullptr;
};

// Gradient buffers handed to backward closures. Buffers are allocated
// lazily, zero-filled, with the size of the node they belong to.
class GradientSink {
 public:
  explicit GradientSink(const Tape& tape);
  std::span<double> grad(int node);
  bool has(int node) const { return !buffers_[static_cast<std::size_t>(node)].empty(); }
  std::span<const double> peek(int node) const { return buffers_[static_cast<std::size_t>(node)]; }

 private:
  const Tape* tape_;
  std::vector<std::vector<double>> buffers_;
};

/// Node id -> gradient tensor, as returned by Tape::backward.
class Gradients {
 public:
  const Tensor& at(int node) const;
  const Tensor& at(const Tensor& leaf) const { return at(leaf.node()); }
  bool contains(int node) const { return grads_.count(node) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

// Explicit gradient tape. Operations record themselves onto the tape made
// active by a Tape::Scope; recording order is a topological order. A tape
// is meant for one forward pass; backward() does not consume it and may be
// replayed.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out, GradientSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a gradient leaf and returns a tracked copy.
  Tensor leaf(Tensor value);

  // Records a non-leaf node. `backward` receives dL/d(output) and must
  // accumulate into the sink buffers of its inputs.
  Tensor record(Tensor output, BackwardFn backward);

  Gradients backward(const Tensor& loss, std::span<const Tensor> leaves) const;
  Gradients backward(const Tensor& loss, std::initializer_list<Tensor> leaves) const {
    return backward(loss, std::span<const Tensor>(leaves.begin(), leaves.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t node_numel(int node) const { return nodes_.at(static_cast<std::size_t>(node)).numel; }
  Shape node_shape(int node) const { return nodes_.at(static_cast<std::size_t>(node)).shape; }

  static Tape* active();

  // RAII activation; scopes nest.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  // Suspends recording (e.g. for evaluation passes inside a taped region).
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* previous_;
  };

 private:
  struct Node {
    Shape shape;
    std::size_t numel = 0;
    BackwardFn backward;  // empty for leaves
  };
  std::vector<Node> nodes_;
};

// True when an op over these inputs has to be recorded on the active tape.
bool should_record(std::initializer_list<const Tensor*> inputs);

// ---- primitives ----------------------------------------------------------

// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);

// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over one axis; the axis is removed from the result shape.
Tensor mean_axis(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor gelu(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-6;
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps);

// Mean cross-entropy of logits[B, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace psaq::ad
