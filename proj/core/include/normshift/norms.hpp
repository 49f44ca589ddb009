#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "normshift/ops.hpp"

namespace normshift {

enum class NormKind { None, BN, BNTest, IN, LN, GN, SN, ASR };
enum class Mode { Train, Eval };

NormKind parse_norm_kind(std::string_view name);
std::string_view norm_kind_name(NormKind kind);

struct NormConfig {
  NormKind kind = NormKind::BN;
  std::size_t groups = 8;         // GN only
  bool sn_include_bn = false;     // SN: keep the batch constituent
  bool pretrain_variant = false;  // ASR: learnable weights on the rescaling terms
  double eps = 1e-5;
  double momentum = 0.9;  // EMA: running <- m * running + (1 - m) * batch
  std::size_t stan_divisor = 2;      // C_stan = C / stan_divisor
  std::size_t rescale_divisor = 16;  // C_rescale = max(1, C / rescale_divisor)
  double residual_init = -3.0;        // rho_mu, rho_sigma
  double rescale_weight_init = -5.0;  // rho_beta, rho_gamma
};

// Per-sample channel mean and population standard deviation, each (N,C).
template <typename T>
struct ChannelStats {
  Var<T> mu;
  Var<T> sigma;
};

template <typename T>
ChannelStats<T> channel_stats(Var<T> x);

template <typename T>
struct BNState {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

// IN (groups = C), LN (groups = 1) and GN.
template <typename T>
struct GroupState {
  std::size_t groups = 1;
  Param<T> gamma, beta;
  double eps = 1e-5;
};

// Constituent order in the logits: batch, instance, layer.
template <typename T>
struct SNState {
  Param<T> mean_logits, std_logits;
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  bool include_bn = false;
  double momentum = 0.9;
  double eps = 1e-5;
};

template <typename T>
struct ASRState {
  std::size_t channels = 0, c_stan = 0, c_rescale = 0;
  // Standardization: encoder shared by the mean and std paths.
  Param<T> stan_enc_w, stan_enc_b;
  Param<T> mu_dec_w, mu_dec_b;
  Param<T> sigma_dec_w, sigma_dec_b;
  // Rescaling: encoder shared by the beta and gamma paths.
  Param<T> rescale_enc_w, rescale_enc_b;
  Param<T> beta_dec_w, beta_dec_b;
  Param<T> gamma_dec_w, gamma_dec_b;
  Param<T> rho_mu, rho_sigma;  // residual weight logits
  Param<T> gamma_bias, beta_bias;
  bool pretrain_variant = false;
  Param<T> rho_beta, rho_gamma;  // present only with pretrain_variant
  double eps = 1e-5;
};

template <typename T>
using NormState = std::variant<std::monostate, BNState<T>, GroupState<T>, SNState<T>, ASRState<T>>;

template <typename T>
struct StandardizeOutput {
  Var<T> x_stan;
  Var<T> mu_stan, sigma_stan;  // (N,C)
  Var<T> mu, sigma;            // raw channel statistics of x
};

template <typename T>
struct RescaleOutput {
  Var<T> out;
  Var<T> gamma, beta;  // (N,C)
};

// Captured learned standardization statistics of one ASR layer.
template <typename T>
struct StatsProbe {
  Tensor<T> mu_stan, sigma_stan;
};

template <typename T>
Var<T> bn_forward(Var<T> x, BNState<T>& state, Mode mode);
// Batch statistics at evaluation time, no EMA update.
template <typename T>
Var<T> bn_test_forward(Var<T> x, BNState<T>& state);
template <typename T>
Var<T> group_forward(Var<T> x, GroupState<T>& state);
template <typename T>
Var<T> sn_forward(Var<T> x, SNState<T>& state, Mode mode);
template <typename T>
StandardizeOutput<T> as_forward(Var<T> x, ASRState<T>& state);
// mu, sigma are the statistics of the original input, not of x_stan.
template <typename T>
RescaleOutput<T> ar_forward(Var<T> x_stan, Var<T> mu, Var<T> sigma, ASRState<T>& state);
template <typename T>
Var<T> asr_forward(Var<T> x, ASRState<T>& state, StatsProbe<T>* probe = nullptr);

struct ResidualWeights {
  double lambda_mu, lambda_sigma;
  std::optional<double> lambda_beta, lambda_gamma;
};

template <typename T>
ResidualWeights residual_weights(const ASRState<T>& state);

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// One normalization layer of a given kind over C channels.
template <typename T>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, std::size_t channels, NormState<T> state)
      : kind_(kind), channels_(channels), state_(std::move(state)) {}

  NormKind kind() const { return kind_; }
  std::size_t channels() const { return channels_; }
  NormState<T>& state() { return state_; }
  const NormState<T>& state() const { return state_; }

  Var<T> forward(Var<T> x, Mode mode, StatsProbe<T>* probe = nullptr);

  std::vector<Param<T>*> params();
  std::vector<NamedBuffer<T>> buffers();

 private:
  NormKind kind_ = NormKind::None;
  std::size_t channels_ = 0;
  NormState<T> state_;
};

// Seeded initialization. Parameter names are prefixed with `prefix`.
template <typename T>
NormLayer<T> init_norm(NormKind kind, std::size_t channels, const NormConfig& config, std::uint64_t seed,
                       const std::string& prefix = "");

// Bottleneck widths for an ASR layer over C channels.
std::pair<std::size_t, std::size_t> asr_widths(std::size_t channels, const NormConfig& config);

// Closed-form trainable parameter count of one layer.
std::size_t norm_param_count(NormKind kind, std::size_t channels, const NormConfig& config);

}  // namespace normshift
