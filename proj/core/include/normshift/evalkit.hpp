#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "normshift/datagen.hpp"
#include "normshift/model.hpp"

namespace normshift {

// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

// sum_k (1{k=label} - p_k)^2 / K for one distribution. Rejects probabilities
// that are negative or do not sum to 1 within 1e-4.
double brier(std::span<const double> probs, std::int32_t label);
// Per-sample mean over an (N,K) probability matrix.
template <typename T>
double brier(const Tensor<T>& probs, std::span<const std::int32_t> labels);

struct DomainResult {
  std::string domain;  // "source", corruption type, or "style:<name>"
  int level = 0;
  std::size_t n = 0;
  double accuracy = 0;
  double brier = 0;
};

struct LevelAverage {
  int level = 0;
  double accuracy = 0, brier = 0;
};

struct EvalReport {
  std::vector<DomainResult> rows;
  std::vector<LevelAverage> level_averages;  // over corruption rows, per level present
  std::optional<LevelAverage> corruption_average;  // over all corruption rows (level field 0)
  std::optional<LevelAverage> overall_average;     // over every row
  std::string model_fingerprint;
};

std::string domain_column(const DomainSpec& spec);

// Runs the model over `ds` in eval mode in chunks of `batch`; chunks may be
// processed by several workers and are merged in index order.
DomainResult evaluate(Model<float>& model, const Dataset& ds, const DomainSpec& spec, std::size_t batch = 256);

// Every spec is generated from a clean set gen_source(spec.seed, n, classes).
EvalReport evaluate_grid(Model<float>& model, std::span<const DomainSpec> specs, std::size_t n,
                         std::size_t batch = 256);
EvalReport make_report(std::vector<DomainResult> rows);

// The source domain followed by every corruption type at levels 1..5.
std::vector<DomainSpec> corruption_grid(std::uint64_t seed);

inline constexpr const char* kMetricsHeader = "run_id,domain,level,n,accuracy,brier";
std::string metrics_csv_rows(const std::string& run_id, std::span<const DomainResult> rows);
// Creates the file with a header, or appends rows to an existing one.
void append_metrics_csv(const std::filesystem::path& path, const std::string& run_id,
                        std::span<const DomainResult> rows);

struct TrajectoryRow {
  std::size_t step = 0;
  std::size_t layer = 0;  // 1-based ASR layer index
  ResidualWeights weights{};
};

class TrajectoryLog {
 public:
  // Steps must be strictly increasing across calls; ValidationError otherwise.
  void append(std::size_t step, std::span<const ResidualWeights> per_layer);
  const std::vector<TrajectoryRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  std::string csv() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<TrajectoryRow> rows_;
  std::optional<std::size_t> last_step_;
};

inline constexpr const char* kTrajectoryHeader = "step,layer,lambda_mu,lambda_sigma,lambda_beta,lambda_gamma";

// Records sigmoid of every residual logit per ASR layer. Returns false and
// prints a warning when the model has no ASR layer.
template <typename T>
bool log_residual_weights(const Model<T>& model, std::size_t step, TrajectoryLog& log);

// One row per sample: domain tag, label, mu_stan[0..C), sigma_stan[0..C) of the
// chosen ASR layer (0-based). ValidationError for models without ASR.
void dump_learned_stats(Model<float>& model, const Dataset& ds, const std::string& domain,
                        const std::filesystem::path& path, std::size_t layer = 0, std::size_t batch = 256);

// FNV-1a over parameter names, shapes and bytes.
std::string model_fingerprint(const Model<float>& model);

std::string format_double(double v);

}  // namespace normshift
