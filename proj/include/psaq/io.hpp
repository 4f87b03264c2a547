#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "psaq/data.hpp"
#include "psaq/losses.hpp"
#include "psaq/pipeline.hpp"
#include "psaq/quantizer.hpp"
#include "psaq/vit.hpp"

namespace psaq::io {

// ---- config ---------------------------------------------------------------

struct RunConfig {
  ViTConfig model;
  PipelineConfig pipeline;
  SyntheticSpec data;
  std::uint64_t data_seed = 7;
  PretrainOptions pretrain{8, 2e-3, 32, 0};

  bool operator==(const RunConfig& o) const {
    return model == o.model && pipeline == o.pipeline && data_seed == o.data_seed &&
           data.classes == o.data.classes && data.image_size == o.data.image_size &&
           data.channels == o.data.channels && data.noise == o.data.noise && data.amplitude == o.data.amplitude &&
           data.off_channel == o.data.off_channel && data.train_size == o.data.train_size &&
           data.test_size == o.data.test_size && pretrain.epochs == o.pretrain.epochs &&
           pretrain.lr == o.pretrain.lr && pretrain.batch == o.pretrain.batch && pretrain.seed == o.pretrain.seed;
  }
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, std::string key, std::size_t line)
      : std::runtime_error(message), key_(std::move(key)), line_(line) {}
  const std::string& key() const { return key_; }
  std::size_t line() const { return line_; }  // 1-based, 0 when not tied to a line

 private:
  std::string key_;
  std::size_t line_;
};

// Thrown for keys outside the schema; the CLI maps it to exit code 2.
class UnknownKeyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// `key = value` lines; '#' starts a comment; blank lines are ignored.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Canonical text: every key, one per line, in schema order.
std::string serialize_config(const RunConfig& config);

std::vector<std::string> config_keys();

// Synthetic-data spec whose image shape and class count follow model.*.
SyntheticSpec data_spec(const RunConfig& config);

// ---- checkpoints ----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuantState {
  int w_bits = 8;
  int a_bits = 8;
  Calibration calibration = Calibration::MinMax;
  double ema_momentum = QuantizedModel::kDefaultEmaMomentum;
  std::map<std::string, QuantParams> weights;
  std::vector<ActivationQuantizer> activations;
};

struct Checkpoint {
  ViTConfig config;
  ViTParams params;  // FP weights, or the student's shadow weights
  std::optional<QuantState> quant;

  QuantizedModel to_quantized() const;
};

std::string encode_checkpoint(const ViTConfig& config, const ViTParams& params,
                              const QuantizedModel* quant = nullptr);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ViTConfig& config, const ViTParams& params,
                     const QuantizedModel* quant = nullptr);
void save_checkpoint(const std::filesystem::path& path, const QuantizedModel& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- files ----------------------------------------------------------------

// Writes via a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// One P6 image: per-image [mean - 3 std, mean + 3 std] mapped to [0, 255].
std::string encode_ppm(const ad::Tensor& images, std::size_t index);
// Writes sample_<idx>.ppm for every image; returns the paths.
std::vector<std::filesystem::path> export_samples(const GeneratedBatch& g, const std::filesystem::path& dir);

inline constexpr const char* kMetricsHeader = "cycle,stage,step,loss_pse,loss_d,loss_g,loss_q,wall_ms";
std::string metrics_csv(const std::vector<MetricsRecord>& rows);

// Kernel density of the pooled patch similarities of every block.
std::vector<DensityCurve> block_density_curves(const FpModel& model, const ad::Tensor& inputs);
// Mean per-sample patch-similarity entropy of every block.
std::vector<double> block_entropies(const FpModel& model, const ad::Tensor& inputs);
std::string density_csv(const std::vector<DensityCurve>& curves);

// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace psaq::io
