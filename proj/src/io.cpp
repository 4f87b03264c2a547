#include "psaq/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace psaq::io {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---- config ---------------------------------------------------------------

namespace {

struct BadValue {};

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) throw BadValue{};
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) throw BadValue{};
  return out;
}

int to_int(const std::string& v) {
  int out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) throw BadValue{};
  return out;
}

double to_double(const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || !std::isfinite(out)) throw BadValue{};
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw BadValue{};
}

GenerationObjective to_objective(const std::string& v) {
  for (auto o : {GenerationObjective::PseAndDiscrepancy, GenerationObjective::PseOnly,
                 GenerationObjective::DiscrepancyOnly, GenerationObjective::NoiseOnly}) {
    if (v == to_string(o)) return o;
  }
  throw BadValue{};
}

Discrepancy to_discrepancy(const std::string& v) {
  if (v == "mae") return Discrepancy::Mae;
  if (v == "kl") return Discrepancy::Kl;
  throw BadValue{};
}

Calibration to_calibration(const std::string& v) {
  if (v == "minmax") return Calibration::MinMax;
  if (v == "ema") return Calibration::Ema;
  throw BadValue{};
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_FIELD(k, m) \
  Field { k, [](const RunConfig& c) { return std::to_string(c.m); }, [](RunConfig& c, const std::string& v) { c.m = to_size(v); } }
#define U64_FIELD(k, m) \
  Field { k, [](const RunConfig& c) { return std::to_string(c.m); }, [](RunConfig& c, const std::string& v) { c.m = to_u64(v); } }
#define INT_FIELD(k, m) \
  Field { k, [](const RunConfig& c) { return std::to_string(c.m); }, [](RunConfig& c, const std::string& v) { c.m = to_int(v); } }
#define DOUBLE_FIELD(k, m) \
  Field { k, [](const RunConfig& c) { return format_double(c.m); }, [](RunConfig& c, const std::string& v) { c.m = to_double(v); } }
#define BOOL_FIELD(k, m)                                                 \
  Field {                                                                \
    k, [](const RunConfig& c) { return std::string(c.m ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.m = to_bool(v); }     \
  }

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      SIZE_FIELD("model.image_size", model.image_size),
      SIZE_FIELD("model.channels", model.channels),
      SIZE_FIELD("model.patch_size", model.patch_size),
      SIZE_FIELD("model.blocks", model.blocks),
      SIZE_FIELD("model.heads", model.heads),
      SIZE_FIELD("model.head_dim", model.head_dim),
      SIZE_FIELD("model.classes", model.classes),
      INT_FIELD("quant.w_bits", pipeline.w_bits),
      INT_FIELD("quant.a_bits", pipeline.a_bits),
      Field{"quant.calibration", [](const RunConfig& c) { return std::string(to_string(c.pipeline.calibration)); },
            [](RunConfig& c, const std::string& v) { c.pipeline.calibration = to_calibration(v); }},
      DOUBLE_FIELD("quant.ema_momentum", pipeline.ema_momentum),
      SIZE_FIELD("pipeline.iterations", pipeline.iterations),
      SIZE_FIELD("pipeline.g_step", pipeline.g_step),
      SIZE_FIELD("pipeline.q_step", pipeline.q_step),
      DOUBLE_FIELD("pipeline.lr_g", pipeline.lr_g),
      DOUBLE_FIELD("pipeline.lr_q", pipeline.lr_q),
      DOUBLE_FIELD("pipeline.alpha", pipeline.alpha),
      SIZE_FIELD("pipeline.batch", pipeline.batch),
      DOUBLE_FIELD("pipeline.weight_decay", pipeline.weight_decay),
      U64_FIELD("pipeline.seed", pipeline.seed),
      Field{"pipeline.objective", [](const RunConfig& c) { return std::string(to_string(c.pipeline.objective)); },
            [](RunConfig& c, const std::string& v) { c.pipeline.objective = to_objective(v); }},
      Field{"pipeline.discrepancy", [](const RunConfig& c) { return std::string(to_string(c.pipeline.discrepancy)); },
            [](RunConfig& c, const std::string& v) { c.pipeline.discrepancy = to_discrepancy(v); }},
      DOUBLE_FIELD("pipeline.kl_temperature", pipeline.kl_temperature),
      BOOL_FIELD("pipeline.reset_pixel_adam", pipeline.reset_pixel_adam),
      BOOL_FIELD("pipeline.record_timing", pipeline.record_timing),
      DOUBLE_FIELD("data.noise", data.noise),
      DOUBLE_FIELD("data.amplitude", data.amplitude),
      DOUBLE_FIELD("data.off_channel", data.off_channel),
      SIZE_FIELD("data.train_size", data.train_size),
      SIZE_FIELD("data.test_size", data.test_size),
      U64_FIELD("data.seed", data_seed),
      SIZE_FIELD("pretrain.epochs", pretrain.epochs),
      DOUBLE_FIELD("pretrain.lr", pretrain.lr),
      SIZE_FIELD("pretrain.batch", pretrain.batch),
      U64_FIELD("pretrain.seed", pretrain.seed),
  };
  return fields;
}

#undef SIZE_FIELD
#undef U64_FIELD
#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : schema()) keys.emplace_back(f.key);
  return keys;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`", "", lineno);
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    auto it = std::find_if(schema().begin(), schema().end(), [&](const Field& f) { return key == f.key; });
    if (it == schema().end()) {
      throw UnknownKeyError("line " + std::to_string(lineno) + ": unknown config key '" + key + "'", key, lineno);
    }
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate config key '" + key + "'", key, lineno);
    }
    try {
      it->set(cfg, value);
    } catch (const BadValue&) {
      throw ConfigError("line " + std::to_string(lineno) + ": invalid value '" + value + "' for '" + key + "'", key,
                        lineno);
    }
  }
  try {
    cfg.model.validate();
    cfg.pipeline.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what(), "", 0);
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : schema()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

SyntheticSpec data_spec(const RunConfig& config) {
  SyntheticSpec spec = config.data;
  spec.classes = config.model.classes;
  spec.image_size = config.model.image_size;
  spec.channels = config.model.channels;
  return spec;
}

// ---- files ----------------------------------------------------------------

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- checkpoints ----------------------------------------------------------

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.append(b, sizeof(T));
  }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out += s;
  }
  std::string out;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes(b) {}
  template <class T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw CheckpointError("corrupt checkpoint: truncated");
    char b[sizeof(T)];
    std::memcpy(b, bytes.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    if (pos + n > bytes.size()) throw CheckpointError("corrupt checkpoint: truncated");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  const std::string& bytes;
  std::size_t pos = 0;
};

void put_qparams(Writer& w, const QuantParams& qp) {
  w.put(static_cast<std::int32_t>(qp.bits));
  w.put(qp.q0);
  w.put(qp.qmax);
  w.put(qp.delta);
  w.put(static_cast<std::uint8_t>(qp.scheme));
}

QuantParams get_qparams(Reader& r) {
  QuantParams qp;
  qp.bits = r.get<std::int32_t>();
  qp.q0 = r.get<double>();
  qp.qmax = r.get<double>();
  qp.delta = r.get<double>();
  const auto scheme = r.get<std::uint8_t>();
  if (scheme > 1 || qp.bits < 1 || qp.bits > 16) throw CheckpointError("corrupt checkpoint: bad quantizer");
  qp.scheme = static_cast<Scheme>(scheme);
  return qp;
}

}  // namespace

std::string encode_checkpoint(const ViTConfig& config, const ViTParams& params, const QuantizedModel* quant) {
  Writer w;
  w.out = "PSAQ";
  w.put(kCheckpointVersion);
  for (auto v : {config.image_size, config.channels, config.patch_size, config.blocks, config.heads, config.head_dim,
                 config.classes}) {
    w.put(static_cast<std::uint64_t>(v));
  }
  const auto named = params.named();
  w.put(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.str(name);
    w.put(static_cast<std::uint32_t>(t->shape().size()));
    for (auto d : t->shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : t->vec()) w.put(v);
  }
  w.put(static_cast<std::uint8_t>(quant ? 1 : 0));
  if (quant) {
    w.put(static_cast<std::int32_t>(quant->w_bits()));
    w.put(static_cast<std::int32_t>(quant->a_bits()));
    w.put(static_cast<std::uint8_t>(quant->calibration()));
    w.put(quant->ema_momentum());
    w.put(static_cast<std::uint32_t>(quant->weight_quantizers().size()));
    for (const auto& [name, qp] : quant->weight_quantizers()) {
      w.str(name);
      put_qparams(w, qp);
    }
    w.put(static_cast<std::uint32_t>(quant->activation_quantizers().size()));
    for (const auto& aq : quant->activation_quantizers()) {
      w.put(static_cast<std::uint8_t>(aq.range ? 1 : 0));
      if (aq.range) {
        w.put(aq.range->lo);
        w.put(aq.range->hi);
      }
      w.put(static_cast<std::uint8_t>(aq.params ? 1 : 0));
      if (aq.params) put_qparams(w, *aq.params);
    }
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "PSAQ") != 0) throw CheckpointError("not a checkpoint: bad magic");
  Reader r(bytes);
  r.pos = 4;
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  auto dim = [&] {
    const auto v = r.get<std::uint64_t>();
    if (v > (1u << 20)) throw CheckpointError("corrupt checkpoint: implausible dimension");
    return static_cast<std::size_t>(v);
  };
  ck.config.image_size = dim();
  ck.config.channels = dim();
  ck.config.patch_size = dim();
  ck.config.blocks = dim();
  ck.config.heads = dim();
  ck.config.head_dim = dim();
  ck.config.classes = dim();
  try {
    ck.config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  ck.params = ViTParams::init(ck.config, 0);
  auto named = ck.params.named();
  const auto count = r.get<std::uint32_t>();
  if (count != named.size()) throw CheckpointError("corrupt checkpoint: tensor count mismatch");
  for (auto& [name, t] : named) {
    if (r.str() != name) throw CheckpointError("corrupt checkpoint: expected tensor " + name);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("corrupt checkpoint: implausible rank");
    ad::Shape shape(rank);
    for (auto& d : shape) d = dim();
    if (shape != t->shape()) throw CheckpointError("corrupt checkpoint: shape mismatch for " + name);
    std::vector<double> data(ad::shape_numel(shape));
    for (auto& v : data) v = r.get<double>();
    *t = ad::Tensor(shape, std::move(data));
  }
  const auto has_quant = r.get<std::uint8_t>();
  if (has_quant > 1) throw CheckpointError("corrupt checkpoint: bad quantizer flag");
  if (has_quant) {
    QuantState q;
    q.w_bits = r.get<std::int32_t>();
    q.a_bits = r.get<std::int32_t>();
    const auto cal = r.get<std::uint8_t>();
    if (cal > 1) throw CheckpointError("corrupt checkpoint: bad calibration");
    q.calibration = static_cast<Calibration>(cal);
    q.ema_momentum = r.get<double>();
    const auto nw = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nw; ++i) {
      std::string name = r.str();
      q.weights.emplace(std::move(name), get_qparams(r));
    }
    const auto na = r.get<std::uint32_t>();
    if (na != site::count(ck.config.blocks)) throw CheckpointError("corrupt checkpoint: activation site count");
    q.activations.resize(na);
    for (auto& aq : q.activations) {
      if (r.get<std::uint8_t>()) {
        const double lo = r.get<double>();
        const double hi = r.get<double>();
        aq.range = QuantRange{lo, hi};
      }
      if (r.get<std::uint8_t>()) aq.params = get_qparams(r);
    }
    ck.quant = std::move(q);
  }
  if (r.pos != bytes.size()) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return ck;
}

QuantizedModel Checkpoint::to_quantized() const {
  if (!quant) throw CheckpointError("checkpoint has no quantizer section");
  QuantizedModel m;
  try {
    m = QuantizedModel(params, config, quant->w_bits, quant->a_bits, quant->calibration, quant->ema_momentum);
    if (quant->weights.size() != m.weight_quantizers().size()) {
      throw CheckpointError("corrupt checkpoint: weight quantizer count");
    }
    for (const auto& [name, qp] : quant->weights) m.set_weight_quantizer(name, qp);
    for (std::size_t s = 0; s < quant->activations.size(); ++s) m.set_activation_quantizer(s, quant->activations[s]);
  } catch (const ContractError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  return m;
}

void save_checkpoint(const fs::path& path, const ViTConfig& config, const ViTParams& params,
                     const QuantizedModel* quant) {
  write_file_atomic(path, encode_checkpoint(config, params, quant));
}

void save_checkpoint(const fs::path& path, const QuantizedModel& model) {
  save_checkpoint(path, model.config(), model.shadow(), &model);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path));
}

// ---- images and CSV ---------------------------------------------------------

std::string encode_ppm(const ad::Tensor& images, std::size_t index) {
  const auto& shape = images.shape();
  if (shape.size() != 4 || index >= shape[0]) throw ContractError("encode_ppm: expected [B, C, S, S] and a valid index");
  const std::size_t c = shape[1], h = shape[2], w = shape[3];
  if (c != 3 && c != 1) throw ContractError("encode_ppm: need 1 or 3 channels");
  const std::size_t n = c * h * w;
  const double* px = images.vec().data() + index * n;
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += px[i];
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  const double lo = mean - 3 * sd, span = 6 * sd;
  const bool flat = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));  // rounding noise counts as constant
  auto level = [&](double v) -> unsigned char {
    if (flat) return 128;
    const double t = std::clamp((v - lo) / span * 255.0, 0.0, 255.0);
    return static_cast<unsigned char>(std::lround(t));
  };
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t src = c == 1 ? 0 : ch;
        out.push_back(static_cast<char>(level(px[(src * h + y) * w + x])));
      }
    }
  }
  return out;
}

std::vector<fs::path> export_samples(const GeneratedBatch& g, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  for (std::size_t i = 0; i < g.pixels.shape().at(0); ++i) {
    paths.push_back(dir / ("sample_" + std::to_string(i) + ".ppm"));
    write_file_atomic(paths.back(), encode_ppm(g.pixels, i));
  }
  return paths;
}

std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : rows) {
    out += std::to_string(r.cycle) + "," + r.stage + "," + std::to_string(r.step) + "," + opt(r.loss_pse) + "," +
           opt(r.loss_d) + "," + opt(r.loss_g) + "," + opt(r.loss_q) + "," + opt(r.wall_ms) + "\n";
  }
  return out;
}

std::vector<DensityCurve> block_density_curves(const FpModel& model, const ad::Tensor& inputs) {
  const auto fwd = model_forward(inputs, model.params, model.config, true);
  std::vector<DensityCurve> curves;
  for (const auto& o : fwd.hooks) {
    std::vector<double> pooled;
    for (const auto& g : patch_similarity(o)) pooled.insert(pooled.end(), g.gamma.begin(), g.gamma.end());
    curves.push_back(density_curve(pooled));
  }
  return curves;
}

std::vector<double> block_entropies(const FpModel& model, const ad::Tensor& inputs) {
  const auto fwd = model_forward(inputs, model.params, model.config, true);
  std::vector<double> out;
  for (const auto& o : fwd.hooks) {
    const auto sims = patch_similarity(o);
    double acc = 0;
    for (const auto& g : sims) acc += differential_entropy(g);
    out.push_back(acc / static_cast<double>(sims.size()));
  }
  return out;
}

std::string density_csv(const std::vector<DensityCurve>& curves) {
  std::string out = "block,x,f\n";
  for (std::size_t l = 0; l < curves.size(); ++l) {
    for (std::size_t q = 0; q < curves[l].x.size(); ++q) {
      out += std::to_string(l) + "," + format_double(curves[l].x[q]) + "," + format_double(curves[l].f[q]) + "\n";
    }
  }
  return out;
}

}  // namespace psaq::io
