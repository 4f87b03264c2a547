#include "psaq/vit.hpp"

#include <cmath>
#include <numeric>

#include "psaq/data.hpp"
#include "psaq/optim.hpp"
#include "psaq/rng.hpp"

namespace psaq {

using ad::Tensor;

void ViTConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0 || blocks == 0 || heads == 0 || head_dim == 0 ||
      classes == 0) {
    throw ContractError("ViTConfig: all sizes must be positive");
  }
  if (image_size % patch_size != 0) throw ContractError("ViTConfig: image_size must be divisible by patch_size");
  if (tokens() < 4) throw ContractError("ViTConfig: need at least 4 patches");
}

namespace {

Tensor normal_tensor(ad::Shape shape, CounterRng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

template <typename Params, typename Out>
void enumerate(Params& p, Out& out) {
  out.emplace_back("embed.w", &p.embed_w);
  out.emplace_back("embed.b", &p.embed_b);
  out.emplace_back("pos", &p.pos);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1.g", &b.ln1_g);
    out.emplace_back(pre + "ln1.b", &b.ln1_b);
    out.emplace_back(pre + "wq", &b.wq);
    out.emplace_back(pre + "wk", &b.wk);
    out.emplace_back(pre + "wv", &b.wv);
    out.emplace_back(pre + "wo", &b.wo);
    out.emplace_back(pre + "ln2.g", &b.ln2_g);
    out.emplace_back(pre + "ln2.b", &b.ln2_b);
    out.emplace_back(pre + "fc1.w", &b.w1);
    out.emplace_back(pre + "fc1.b", &b.b1);
    out.emplace_back(pre + "fc2.w", &b.w2);
    out.emplace_back(pre + "fc2.b", &b.b2);
  }
  out.emplace_back("norm.g", &p.norm_g);
  out.emplace_back("norm.b", &p.norm_b);
  out.emplace_back("head.w", &p.head_w);
  out.emplace_back("head.b", &p.head_b);
}

Tensor act(OperandQuantizer* q, std::size_t s, const Tensor& x) { return q ? q->activation(s, x) : x; }

Tensor wgt(OperandQuantizer* q, const std::string& name, const Tensor& w) { return q ? q->weight(name, w) : w; }

std::string block_name(std::size_t l, const char* leaf) { return "block" + std::to_string(l) + "." + leaf; }

}  // namespace

ViTParams ViTParams::init(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  CounterRng rng(seed, 0x5649545F494E4954ULL);
  const std::size_t d = config.width(), hid = config.mlp_hidden();
  constexpr double kStd = 0.02;
  ViTParams p;
  p.embed_w = normal_tensor({config.patch_dim(), d}, rng, kStd);
  p.embed_b = Tensor({d});
  p.pos = normal_tensor({config.tokens(), d}, rng, kStd);
  for (std::size_t l = 0; l < config.blocks; ++l) {
    BlockParams b;
    b.ln1_g = Tensor({d}, 1.0);
    b.ln1_b = Tensor({d});
    b.wq = normal_tensor({d, d}, rng, kStd);
    b.wk = normal_tensor({d, d}, rng, kStd);
    b.wv = normal_tensor({d, d}, rng, kStd);
    b.wo = normal_tensor({d, d}, rng, kStd);
    b.ln2_g = Tensor({d}, 1.0);
    b.ln2_b = Tensor({d});
    b.w1 = normal_tensor({d, hid}, rng, kStd);
    b.b1 = Tensor({hid});
    b.w2 = normal_tensor({hid, d}, rng, kStd);
    b.b2 = Tensor({d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_g = Tensor({d}, 1.0);
  p.norm_b = Tensor({d});
  p.head_w = normal_tensor({d, config.classes}, rng, kStd);
  p.head_b = Tensor({config.classes});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ViTParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  enumerate(*this, out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ViTParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  enumerate(*this, out);
  return out;
}

std::size_t ViTParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->numel();
  return n;
}

void ViTParams::validate(const ViTConfig& config) const {
  if (blocks.size() != config.blocks) throw ContractError("ViTParams: block count does not match config");
  const ViTParams ref = init(config, 0);
  const auto mine = named();
  const auto want = ref.named();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].second->shape() != want[i].second->shape()) {
      throw ContractError("ViTParams: " + mine[i].first + " has shape " + ad::shape_str(mine[i].second->shape()) +
                          ", expected " + ad::shape_str(want[i].second->shape()));
    }
    for (double v : mine[i].second->data()) {
      if (!std::isfinite(v)) throw ContractError("ViTParams: non-finite value in " + mine[i].first);
    }
  }
}

ViTParams ViTParams::attach(ad::Tape& tape) const {
  ViTParams out = *this;
  for (auto& [name, t] : out.named()) *t = tape.leaf(t->detach());
  return out;
}

bool is_matmul_weight(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return name == "embed.w" || name == "head.w" || ends_with(".wq") || ends_with(".wk") || ends_with(".wv") ||
         ends_with(".wo") || ends_with("fc1.w") || ends_with("fc2.w");
}

std::vector<std::string> activation_site_names(const ViTConfig& config) {
  static const char* kBlock[] = {"attn_in", "q", "k", "v", "proj_in", "proj_out", "mlp_in", "fc1_out", "fc2_in", "fc2_out"};
  std::vector<std::string> names = {"embed_in", "embed_out"};
  for (std::size_t l = 0; l < config.blocks; ++l) {
    for (const char* leaf : kBlock) names.push_back(block_name(l, leaf));
  }
  names.emplace_back("head_in");
  names.emplace_back("head_out");
  return names;
}

Tensor patchify(const Tensor& image, const ViTConfig& config) {
  if (image.rank() != 4 || image.dim(1) != config.channels || image.dim(2) != config.image_size ||
      image.dim(3) != config.image_size) {
    throw DimensionError("patchify: expected [B," + std::to_string(config.channels) + "," +
                         std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "], got " +
                         ad::shape_str(image.shape()));
  }
  const std::size_t b = image.dim(0), c = config.channels, g = config.grid(), p = config.patch_size;
  Tensor x = ad::reshape(image, {b, c, g, p, g, p});
  x = ad::permute(x, {0, 2, 4, 1, 3, 5});
  return ad::reshape(x, {b, g * g, c * p * p});
}

Tensor patch_embed(const Tensor& image, const ViTParams& params, const ViTConfig& config, OperandQuantizer* quant) {
  Tensor patches = act(quant, site::kEmbedIn, patchify(image, config));
  Tensor x = ad::add(ad::matmul(patches, wgt(quant, "embed.w", params.embed_w)), params.embed_b);
  x = act(quant, site::kEmbedOut, x);
  return ad::add(x, params.pos);
}

Tensor msa_forward(const Tensor& x, const BlockParams& block, const ViTConfig& config, MsaHooks* hooks,
                   OperandQuantizer* quant, std::size_t l) {
  if (x.rank() != 3 || x.dim(2) != config.width()) {
    throw DimensionError("msa_forward: expected [B, N, " + std::to_string(config.width()) + "], got " +
                         ad::shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), n = x.dim(1), h = config.heads, dh = config.head_dim;
  Tensor in = act(quant, site::block(l, site::kAttnIn), x);
  auto heads_view = [&](const Tensor& t) { return ad::permute(ad::reshape(t, {b, n, h, dh}), {0, 2, 1, 3}); };
  Tensor q = act(quant, site::block(l, site::kQ), ad::matmul(in, wgt(quant, block_name(l, "wq"), block.wq)));
  Tensor k = act(quant, site::block(l, site::kK), ad::matmul(in, wgt(quant, block_name(l, "wk"), block.wk)));
  Tensor v = act(quant, site::block(l, site::kV), ad::matmul(in, wgt(quant, block_name(l, "wv"), block.wv)));
  Tensor qh = heads_view(q), kh = heads_view(k), vh = heads_view(v);
  Tensor scores = ad::scale(ad::matmul(qh, ad::transpose_last(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = ad::softmax(scores, 3);
  Tensor heads = ad::matmul(attn, vh);  // [B, H, N, dh]
  if (hooks) hooks->push_back(heads);
  Tensor concat = ad::reshape(ad::permute(heads, {0, 2, 1, 3}), {b, n, h * dh});
  concat = act(quant, site::block(l, site::kProjIn), concat);
  return act(quant, site::block(l, site::kProjOut), ad::matmul(concat, wgt(quant, block_name(l, "wo"), block.wo)));
}

Tensor mlp_forward(const Tensor& x, const BlockParams& block, OperandQuantizer* quant, std::size_t l) {
  Tensor in = act(quant, site::block(l, site::kMlpIn), x);
  Tensor hid = ad::add(ad::matmul(in, wgt(quant, block_name(l, "fc1.w"), block.w1)), block.b1);
  hid = act(quant, site::block(l, site::kFc1Out), hid);
  hid = act(quant, site::block(l, site::kFc2In), ad::gelu(hid));
  Tensor out = ad::add(ad::matmul(hid, wgt(quant, block_name(l, "fc2.w"), block.w2)), block.b2);
  return act(quant, site::block(l, site::kFc2Out), out);
}

Tensor block_forward(const Tensor& x, const BlockParams& block, const ViTConfig& config, MsaHooks* hooks,
                     OperandQuantizer* quant, std::size_t l) {
  Tensor xhat = ad::add(x, msa_forward(ad::layer_norm(x, block.ln1_g, block.ln1_b), block, config, hooks, quant, l));
  return ad::add(xhat, mlp_forward(ad::layer_norm(xhat, block.ln2_g, block.ln2_b), block, quant, l));
}

ForwardResult model_forward(const Tensor& image, const ViTParams& params, const ViTConfig& config, bool capture_hooks,
                            OperandQuantizer* quant) {
  ForwardResult r;
  MsaHooks* hooks = capture_hooks ? &r.hooks : nullptr;
  Tensor x = patch_embed(image, params, config, quant);
  for (std::size_t l = 0; l < config.blocks; ++l) x = block_forward(x, params.blocks[l], config, hooks, quant, l);
  x = ad::layer_norm(x, params.norm_g, params.norm_b);
  Tensor pooled = act(quant, site::head_in(config.blocks), ad::mean_axis(x, 1));
  Tensor logits = ad::add(ad::matmul(pooled, wgt(quant, "head.w", params.head_w)), params.head_b);
  r.logits = act(quant, site::head_out(config.blocks), logits);
  return r;
}

ViTParams pretrain_toy(const ViTConfig& config, const SyntheticDataset& train, const PretrainOptions& options,
                       PretrainReport* report) {
  config.validate();
  if (train.size() == 0 || options.batch == 0) throw ContractError("pretrain_toy: empty dataset or batch");
  ViTParams params = ViTParams::init(config, options.seed);
  AdamState adam;
  std::vector<Tensor*> slots;
  for (auto& [name, t] : params.named()) slots.push_back(t);

  if (report) {
    double total = 0.0;
    for (std::size_t i = 0; i < train.size(); i += options.batch) {
      const std::size_t cnt = std::min(options.batch, train.size() - i);
      Tensor logits = model_forward(train.slice(i, cnt), params, config).logits;
      total += ad::cross_entropy(logits, std::span(train.labels).subspan(i, cnt)).item() * static_cast<double>(cnt);
    }
    report->initial_loss = total / static_cast<double>(train.size());
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(options.seed, 0x5348554646000000ULL + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    for (std::size_t i = 0; i < order.size(); i += options.batch) {
      const std::size_t cnt = std::min(options.batch, order.size() - i);
      std::span<const std::size_t> rows(order.data() + i, cnt);
      std::vector<int> labels;
      for (auto r : rows) labels.push_back(train.labels[r]);
      ad::Tape tape;
      ad::Tape::Scope scope(tape);
      ViTParams leaves = params.attach(tape);
      Tensor loss = ad::cross_entropy(model_forward(train.gather(rows), leaves, config).logits, labels);
      if (!std::isfinite(loss.item())) {
        throw TrainingError("pretrain_toy: loss diverged in epoch " + std::to_string(epoch));
      }
      std::vector<Tensor> leaf_list;
      for (auto& [name, t] : leaves.named()) leaf_list.push_back(*t);
      auto grads = tape.backward(loss, leaf_list);
      std::vector<Tensor> g;
      for (const auto& t : leaf_list) g.push_back(grads.at(t));
      adam_step(slots, g, adam, options.lr);
      epoch_loss += loss.item() * static_cast<double>(cnt);
    }
    if (report) report->epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return params;
}

}  // namespace psaq
