#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normshift/norms.hpp"

namespace normshift {

// conv -> norm -> ReLU -> maxpool per conv entry, then fc -> ReLU per fc
// width, then a final fc to `classes` logits.
struct ModelConfig {
  std::size_t in_channels = 3, in_height = 24, in_width = 24;
  std::vector<std::size_t> conv_channels{16, 32};
  std::size_t kernel = 3;
  std::size_t pad = 1;
  std::size_t pool = 2;
  std::vector<std::size_t> fc_widths{128};
  std::size_t classes = 10;
  NormConfig norm;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const NormConfig& config);
// Strict: unknown keys throw ValidationError naming the key.
ModelConfig model_config_from_json(const nlohmann::json& j);
NormConfig norm_config_from_json(const nlohmann::json& j);
void validate(const ModelConfig& config);

template <typename T>
struct ModelOutput {
  Var<T> logits;                  // (N, classes)
  std::optional<Var<T>> features; // post-ReLU activations of the first fc layer
};

template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // `probes`, when given, receives one entry per ASR layer in depth order.
  ModelOutput<T> forward(Tape<T>& tape, Var<T> x, Mode mode, bool want_features = false,
                         std::vector<StatsProbe<T>>* probes = nullptr);

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  // Non-trainable state (BN running statistics), checkpointed with params.
  std::vector<NamedBuffer<T>> buffers();

  std::vector<NormLayer<T>>& norms() { return norms_; }
  const std::vector<NormLayer<T>>& norms() const { return norms_; }

  std::size_t parameter_count() const;
  void zero_grad();

  // Same architecture and values in another precision.
  template <typename U>
  Model<U> cast() const;

 private:
  template <typename U>
  friend class Model;

  ModelConfig config_;
  std::vector<Param<T>> conv_w_, conv_b_;
  std::vector<NormLayer<T>> norms_;
  std::vector<Param<T>> fc_w_, fc_b_;
};

// Spatial size after the conv/pool stack; throws ValidationError on collapse.
std::pair<std::size_t, std::size_t> feature_map_size(const ModelConfig& config);

struct Checkpoint {
  Model<float> model;
  nlohmann::json meta;                         // free-form run metadata
  std::map<std::string, Tensor<float>> extra;  // e.g. optimizer moments
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object(),
                     const std::map<std::string, Tensor<float>>& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace normshift
