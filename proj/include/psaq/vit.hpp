#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psaq/autodiff.hpp"

namespace psaq {

struct SyntheticDataset;

/// Toy plain vision transformer hyperparameters. Width D = heads * head_dim,
/// MLP hidden width is 4 * D, and there is no class token: the head reads
/// the mean of the N patch tokens.
struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t classes = 4;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t width() const { return heads * head_dim; }
  std::size_t mlp_hidden() const { return 4 * width(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  // Throws ContractError on inconsistent values.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

// One transformer block. The per-head projections W_i^Q are the column
// slices [i*head_dim, (i+1)*head_dim) of wq (likewise wk, wv).
struct BlockParams {
  ad::Tensor ln1_g, ln1_b;
  ad::Tensor wq, wk, wv;  // [D, D]
  ad::Tensor wo;          // [D, D]
  ad::Tensor ln2_g, ln2_b;
  ad::Tensor w1, b1;  // [D, 4D], [4D]
  ad::Tensor w2, b2;  // [4D, D], [D]
};

struct ViTParams {
  ad::Tensor embed_w;  // [patch_dim, D]
  ad::Tensor embed_b;  // [D]
  ad::Tensor pos;      // [N, D]
  std::vector<BlockParams> blocks;
  ad::Tensor norm_g, norm_b;
  ad::Tensor head_w;  // [D, classes]
  ad::Tensor head_b;

  // Weights ~ N(0, 0.02^2), biases 0, LayerNorm gamma 1 / beta 0.
  static ViTParams init(const ViTConfig& config, std::uint64_t seed);

  // Stable (name, tensor) enumeration used by checkpoints, optimizers and
  // quantizers. Names look like "embed.w", "block0.wq", "head.b".
  std::vector<std::pair<std::string, ad::Tensor*>> named();
  std::vector<std::pair<std::string, const ad::Tensor*>> named() const;

  std::size_t parameter_count() const;

  // Throws ContractError if any tensor is missing, misshaped or non-finite.
  void validate(const ViTConfig& config) const;

  // Copy whose tensors are leaves of `tape`.
  ViTParams attach(ad::Tape& tape) const;
};

// True for tensors that feed a matmul as the weight operand (these get a
// weight quantizer); biases, LayerNorm and positional tensors stay FP.
bool is_matmul_weight(const std::string& name);

/// Pre-concat head outputs O_l of every block, each [B, H, N, head_dim].
using MsaHooks = std::vector<ad::Tensor>;

// Fake-quantization policy applied at every matmul operand. The FP model
// runs with no policy.
class OperandQuantizer {
 public:
  virtual ~OperandQuantizer() = default;
  virtual ad::Tensor weight(const std::string& name, const ad::Tensor& w) = 0;
  virtual ad::Tensor activation(std::size_t site, const ad::Tensor& x) = 0;
};

// Activation sites, in forward order.
namespace site {
inline constexpr std::size_t kEmbedIn = 0;
inline constexpr std::size_t kEmbedOut = 1;
inline constexpr std::size_t kPerBlock = 10;
enum Block : std::size_t {
  kAttnIn = 0,
  kQ,
  kK,
  kV,
  kProjIn,
  kProjOut,
  kMlpIn,
  kFc1Out,
  kFc2In,
  kFc2Out,
};
inline std::size_t block(std::size_t l, Block b) { return 2 + l * kPerBlock + b; }
inline std::size_t head_in(std::size_t blocks) { return 2 + blocks * kPerBlock; }
inline std::size_t head_out(std::size_t blocks) { return 3 + blocks * kPerBlock; }
inline std::size_t count(std::size_t blocks) { return 4 + blocks * kPerBlock; }
}  // namespace site

std::vector<std::string> activation_site_names(const ViTConfig& config);

// image [B, C, S, S] -> patches [B, N, C*P*P]; patches in row-major grid
// order, each flattened channel-major then row then column.
ad::Tensor patchify(const ad::Tensor& image, const ViTConfig& config);

ad::Tensor patch_embed(const ad::Tensor& image, const ViTParams& params, const ViTConfig& config,
                       OperandQuantizer* quant = nullptr);

// Multi-head self-attention of an already normalized x [B, N, D]. Appends
// the [B, H, N, head_dim] head outputs to `hooks` when given.
ad::Tensor msa_forward(const ad::Tensor& x, const BlockParams& block, const ViTConfig& config,
                       MsaHooks* hooks = nullptr, OperandQuantizer* quant = nullptr,
                       std::size_t block_index = 0);

ad::Tensor mlp_forward(const ad::Tensor& x, const BlockParams& block, OperandQuantizer* quant = nullptr,
                       std::size_t block_index = 0);

// x_hat = x + MSA(LN(x)); y = x_hat + MLP(LN(x_hat)).
ad::Tensor block_forward(const ad::Tensor& x, const BlockParams& block, const ViTConfig& config,
                         MsaHooks* hooks = nullptr, OperandQuantizer* quant = nullptr,
                         std::size_t block_index = 0);

struct ForwardResult {
  ad::Tensor logits;  // [B, classes]
  MsaHooks hooks;     // empty unless captured
};

ForwardResult model_forward(const ad::Tensor& image, const ViTParams& params, const ViTConfig& config,
                            bool capture_hooks = false, OperandQuantizer* quant = nullptr);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainOptions {
  std::size_t epochs = 12;
  double lr = 2e-3;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  double initial_loss = 0.0;       // full-train-set loss before the first update
};

// Cross-entropy training with Adam on the synthetic task.
ViTParams pretrain_toy(const ViTConfig& config, const SyntheticDataset& train, const PretrainOptions& options,
                       PretrainReport* report = nullptr);

}  // namespace psaq
