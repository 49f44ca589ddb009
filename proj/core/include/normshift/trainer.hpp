#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normshift/augment.hpp"
#include "normshift/datagen.hpp"
#include "normshift/evalkit.hpp"
#include "normshift/model.hpp"

namespace normshift {

enum class OptimizerKind { SGD, Adam };
enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD, classical momentum
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::size_t total_steps = 0;  // overrides epochs when > 0
  LrSchedule schedule = LrSchedule::Constant;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // steps between cadence evaluations; 0 = end only
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);  // strict keys
void validate(const TrainConfig& config);
// Also rejects batch size < 2 when the model keeps batch statistics.
void validate(const TrainConfig& config, const ModelConfig& model);

// lr0 * (1 + cos(pi * t / T)) / 2 for cosine, lr0 otherwise.
double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps);

// Both optimizers reject non-finite gradients with NumericalError before
// touching any parameter, and zero every gradient after the update.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}
  void step(std::span<Param<T>* const> params, double lr);

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::span<Param<T>* const> params, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

struct TrainOptions {
  std::string run_id = "run";
  const Dataset* eval_set = nullptr;      // cadence evaluation; defaults to the training set
  std::filesystem::path checkpoint_path;  // empty: no checkpoint written
  bool verbose = false;
};

struct TrainResult {
  std::vector<DomainResult> metrics;     // one source row per cadence point
  std::vector<std::string> metric_runs;  // run_id column for each metrics row
  TrajectoryLog trajectory;
  std::vector<std::size_t> aug_round_steps;
  std::vector<double> losses;  // training loss per optimizer step
  std::size_t steps = 0;
  std::size_t pool_size = 0;  // originals plus appended augmented samples
};

std::size_t planned_steps(const TrainConfig& config, std::size_t n_source);

// Mini-batch training on the source set; with `ada`, every `interval` steps
// one maximization round over the whole source set is appended to the pool,
// up to `aug_rounds` rounds. A non-finite loss saves the model as it stands
// (when a path is set) and throws NumericalError.
TrainResult train(Model<float>& model, const Dataset& source, const TrainConfig& config,
                  const std::optional<AdaConfig>& ada = std::nullopt, const TrainOptions& options = {});

}  // namespace normshift
