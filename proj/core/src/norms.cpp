#include "normshift/norms.hpp"

#include <cmath>
#include <iostream>

#include "normshift/rng.hpp"

namespace normshift {

NormKind parse_norm_kind(std::string_view name) {
  if (name == "none") return NormKind::None;
  if (name == "bn") return NormKind::BN;
  if (name == "bn_test") return NormKind::BNTest;
  if (name == "in") return NormKind::IN;
  if (name == "ln") return NormKind::LN;
  if (name == "gn") return NormKind::GN;
  if (name == "sn") return NormKind::SN;
  if (name == "asr") return NormKind::ASR;
  throw ValidationError("unknown norm kind '" + std::string(name) + "'");
}

std::string_view norm_kind_name(NormKind kind) {
  switch (kind) {
    case NormKind::None: return "none";
    case NormKind::BN: return "bn";
    case NormKind::BNTest: return "bn_test";
    case NormKind::IN: return "in";
    case NormKind::LN: return "ln";
    case NormKind::GN: return "gn";
    case NormKind::SN: return "sn";
    case NormKind::ASR: return "asr";
  }
  return "?";
}

template <typename T>
ChannelStats<T> channel_stats(Var<T> x) {
  const std::size_t c = x.value().rank() == 4 ? x.value().c() : 0;
  return {group_mean(x, c), group_std(x, c)};
}

namespace {

template <typename T>
Var<T> rows_of(Param<T>& p, Tape<T>& tape, std::size_t n) {
  return broadcast_rows(tape.param(p), n);
}

template <typename T>
Var<T> bind(Param<T>& p, Tape<T>& tape) {
  return tape.param(p);
}

template <typename T>
Var<T> sqrt_const(const Tensor<T>& var, Tape<T>& tape, std::size_t n) {
  Tensor<T> sd(Shape{n, var.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < var.size(); ++c) sd.at(i, c) = std::sqrt(std::max(var[c], T(0)));
  return tape.constant(std::move(sd));
}

template <typename T>
Var<T> rows_const(const Tensor<T>& v, Tape<T>& tape, std::size_t n) {
  Tensor<T> out(Shape{n, v.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < v.size(); ++c) out.at(i, c) = v[c];
  return tape.constant(std::move(out));
}

template <typename T>
void ema_update(Tensor<T>& running_mean, Tensor<T>& running_var, const Tensor<T>& mean, const Tensor<T>& sd,
                double momentum) {
  const T m = static_cast<T>(momentum);
  for (std::size_t c = 0; c < mean.size(); ++c) {
    running_mean[c] = m * running_mean[c] + (T(1) - m) * mean[c];
    running_var[c] = m * running_var[c] + (T(1) - m) * sd[c] * sd[c];
  }
}

template <typename T>
void check_channels(Var<T> x, std::size_t channels, const char* op) {
  if (x.value().rank() != 4 || x.value().c() != channels) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(channels) + " channels");
  }
}

template <typename T>
Var<T> batch_standardize(Var<T> x, BNState<T>& state, Var<T>* mean_out, Var<T>* sd_out) {
  check_channels(x, state.gamma.value.size(), "bn");
  const std::size_t n = x.value().n();
  if (n < 2) throw ValidationError("batch statistics need at least 2 samples, got " + std::to_string(n));
  Tape<T>& tape = *x.tape;
  auto mean = batch_mean(x);
  auto sd = batch_std(x);
  if (mean_out) *mean_out = mean;
  if (sd_out) *sd_out = sd;
  return standardize_rescale(x, broadcast_rows(mean, n), broadcast_rows(sd, n), rows_of(state.gamma, tape, n),
                             rows_of(state.beta, tape, n), static_cast<T>(state.eps));
}

}  // namespace

template <typename T>
Var<T> bn_forward(Var<T> x, BNState<T>& state, Mode mode) {
  if (mode == Mode::Train) {
    Var<T> mean, sd;
    auto y = batch_standardize(x, state, &mean, &sd);
    ema_update(state.running_mean, state.running_var, mean.value(), sd.value(), state.momentum);
    return y;
  }
  check_channels(x, state.gamma.value.size(), "bn");
  Tape<T>& tape = *x.tape;
  const std::size_t n = x.value().n();
  return standardize_rescale(x, rows_const(state.running_mean, tape, n), sqrt_const(state.running_var, tape, n),
                             rows_of(state.gamma, tape, n), rows_of(state.beta, tape, n), static_cast<T>(state.eps));
}

template <typename T>
Var<T> bn_test_forward(Var<T> x, BNState<T>& state) {
  return batch_standardize<T>(x, state, nullptr, nullptr);
}

template <typename T>
Var<T> group_forward(Var<T> x, GroupState<T>& state) {
  check_channels(x, state.gamma.value.size(), "group_norm");
  const std::size_t c = x.value().c(), n = x.value().n();
  if (state.groups == 0 || c % state.groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(state.groups) + " groups do not divide " + std::to_string(c) +
                     " channels");
  }
  Tape<T>& tape = *x.tape;
  auto mu = expand_groups(group_mean(x, state.groups), c);
  auto sd = expand_groups(group_std(x, state.groups), c);
  return standardize_rescale(x, mu, sd, rows_of(state.gamma, tape, n), rows_of(state.beta, tape, n),
                             static_cast<T>(state.eps));
}

template <typename T>
Var<T> sn_forward(Var<T> x, SNState<T>& state, Mode mode) {
  check_channels(x, state.gamma.value.size(), "sn");
  Tape<T>& tape = *x.tape;
  const std::size_t c = x.value().c(), n = x.value().n();
  const std::vector<bool> active{state.include_bn, true, true};
  auto wm = softmax(tape.param(state.mean_logits), active);
  auto ws = softmax(tape.param(state.std_logits), active);

  auto in_mu = group_mean(x, c);
  auto in_sd = group_std(x, c);
  auto ln_mu = expand_groups(group_mean(x, 1), c);
  auto ln_sd = expand_groups(group_std(x, 1), c);
  auto mu = add(mul_scalar(in_mu, index(wm, 1)), mul_scalar(ln_mu, index(wm, 2)));
  auto sd = add(mul_scalar(in_sd, index(ws, 1)), mul_scalar(ln_sd, index(ws, 2)));
  if (state.include_bn) {
    Var<T> bn_mu, bn_sd;
    if (mode == Mode::Train) {
      if (n < 2) throw ValidationError("sn: batch constituent needs at least 2 samples");
      auto bm = batch_mean(x);
      auto bs = batch_std(x);
      ema_update(state.running_mean, state.running_var, bm.value(), bs.value(), state.momentum);
      bn_mu = broadcast_rows(bm, n);
      bn_sd = broadcast_rows(bs, n);
    } else {
      bn_mu = rows_const(state.running_mean, tape, n);
      bn_sd = sqrt_const(state.running_var, tape, n);
    }
    mu = add(mu, mul_scalar(bn_mu, index(wm, 0)));
    sd = add(sd, mul_scalar(bn_sd, index(ws, 0)));
  }
  return standardize_rescale(x, mu, sd, rows_of(state.gamma, tape, n), rows_of(state.beta, tape, n),
                             static_cast<T>(state.eps));
}

template <typename T>
StandardizeOutput<T> as_forward(Var<T> x, ASRState<T>& s) {
  check_channels(x, s.channels, "asr");
  Tape<T>& tape = *x.tape;
  auto stats = channel_stats(x);
  auto enc_w = bind(s.stan_enc_w, tape), enc_b = bind(s.stan_enc_b, tape);
  auto learned_mu = fully_connected(relu(fully_connected(stats.mu, enc_w, enc_b)), bind(s.mu_dec_w, tape),
                                    bind(s.mu_dec_b, tape));
  auto learned_sd = relu(fully_connected(relu(fully_connected(stats.sigma, enc_w, enc_b)), bind(s.sigma_dec_w, tape),
                                         bind(s.sigma_dec_b, tape)));
  auto mu_stan = lerp(learned_mu, stats.mu, sigmoid(bind(s.rho_mu, tape)));
  auto sd_stan = lerp(learned_sd, stats.sigma, sigmoid(bind(s.rho_sigma, tape)));
  auto x_stan = standardize(x, mu_stan, sd_stan, static_cast<T>(s.eps));
  return {x_stan, mu_stan, sd_stan, stats.mu, stats.sigma};
}

template <typename T>
RescaleOutput<T> ar_forward(Var<T> x_stan, Var<T> mu, Var<T> sigma, ASRState<T>& s) {
  check_channels(x_stan, s.channels, "asr");
  const std::size_t n = x_stan.value().n();
  for (const auto* v : {&mu, &sigma}) {
    if (v->value().rank() != 2 || v->value().dim(0) != n || v->value().dim(1) != s.channels) {
      throw ShapeError("ar_forward: statistics shape " + shape_str(v->shape()) + " does not match input");
    }
  }
  Tape<T>& tape = *x_stan.tape;
  auto enc_w = bind(s.rescale_enc_w, tape), enc_b = bind(s.rescale_enc_b, tape);
  auto beta_term =
      tanh(fully_connected(relu(fully_connected(mu, enc_w, enc_b)), bind(s.beta_dec_w, tape), bind(s.beta_dec_b, tape)));
  auto gamma_term = sigmoid(fully_connected(relu(fully_connected(sigma, enc_w, enc_b)), bind(s.gamma_dec_w, tape),
                                            bind(s.gamma_dec_b, tape)));
  if (s.pretrain_variant) {
    beta_term = mul_scalar(beta_term, sigmoid(bind(s.rho_beta, tape)));
    gamma_term = mul_scalar(gamma_term, sigmoid(bind(s.rho_gamma, tape)));
  }
  auto beta = add(beta_term, rows_of(s.beta_bias, tape, n));
  auto gamma = add(gamma_term, rows_of(s.gamma_bias, tape, n));
  return {channel_affine(x_stan, gamma, beta), gamma, beta};
}

template <typename T>
Var<T> asr_forward(Var<T> x, ASRState<T>& state, StatsProbe<T>* probe) {
  auto st = as_forward(x, state);
  if (probe) {
    probe->mu_stan = st.mu_stan.value();
    probe->sigma_stan = st.sigma_stan.value();
  }
  return ar_forward(st.x_stan, st.mu, st.sigma, state).out;
}

namespace {
double sigmoid_d(double v) { return 1.0 / (1.0 + std::exp(-v)); }
}  // namespace

template <typename T>
ResidualWeights residual_weights(const ASRState<T>& s) {
  ResidualWeights w{sigmoid_d(static_cast<double>(s.rho_mu.value[0])),
                    sigmoid_d(static_cast<double>(s.rho_sigma.value[0])), std::nullopt, std::nullopt};
  if (s.pretrain_variant) {
    w.lambda_beta = sigmoid_d(static_cast<double>(s.rho_beta.value[0]));
    w.lambda_gamma = sigmoid_d(static_cast<double>(s.rho_gamma.value[0]));
  }
  return w;
}

template <typename T>
Var<T> NormLayer<T>::forward(Var<T> x, Mode mode, StatsProbe<T>* probe) {
  switch (kind_) {
    case NormKind::None: return x;
    case NormKind::BN: return bn_forward(x, std::get<BNState<T>>(state_), mode);
    case NormKind::BNTest: {
      auto& s = std::get<BNState<T>>(state_);
      return mode == Mode::Train ? bn_forward(x, s, mode) : bn_test_forward(x, s);
    }
    case NormKind::IN:
    case NormKind::LN:
    case NormKind::GN: return group_forward(x, std::get<GroupState<T>>(state_));
    case NormKind::SN: return sn_forward(x, std::get<SNState<T>>(state_), mode);
    case NormKind::ASR: return asr_forward(x, std::get<ASRState<T>>(state_), probe);
  }
  return x;
}

template <typename T>
std::vector<Param<T>*> NormLayer<T>::params() {
  struct Visitor {
    std::vector<Param<T>*> operator()(std::monostate&) const { return {}; }
    std::vector<Param<T>*> operator()(BNState<T>& s) const { return {&s.gamma, &s.beta}; }
    std::vector<Param<T>*> operator()(GroupState<T>& s) const { return {&s.gamma, &s.beta}; }
    std::vector<Param<T>*> operator()(SNState<T>& s) const {
      return {&s.mean_logits, &s.std_logits, &s.gamma, &s.beta};
    }
    std::vector<Param<T>*> operator()(ASRState<T>& s) const {
      std::vector<Param<T>*> out{&s.stan_enc_w,    &s.stan_enc_b,    &s.mu_dec_w,    &s.mu_dec_b,
                                 &s.sigma_dec_w,   &s.sigma_dec_b,   &s.rescale_enc_w, &s.rescale_enc_b,
                                 &s.beta_dec_w,    &s.beta_dec_b,    &s.gamma_dec_w, &s.gamma_dec_b,
                                 &s.rho_mu,        &s.rho_sigma,     &s.gamma_bias,  &s.beta_bias};
      if (s.pretrain_variant) {
        out.push_back(&s.rho_beta);
        out.push_back(&s.rho_gamma);
      }
      return out;
    }
  };
  return std::visit(Visitor{}, state_);
}

template <typename T>
std::vector<NamedBuffer<T>> NormLayer<T>::buffers() {
  auto prefix_of = [](const Param<T>& p) {
    const auto dot = p.name.rfind('.');
    return dot == std::string::npos ? std::string() : p.name.substr(0, dot + 1);
  };
  if (auto* s = std::get_if<BNState<T>>(&state_)) {
    const auto pre = prefix_of(s->gamma);
    return {{pre + "running_mean", &s->running_mean}, {pre + "running_var", &s->running_var}};
  }
  if (auto* s = std::get_if<SNState<T>>(&state_)) {
    const auto pre = prefix_of(s->gamma);
    return {{pre + "running_mean", &s->running_mean}, {pre + "running_var", &s->running_var}};
  }
  return {};
}

std::pair<std::size_t, std::size_t> asr_widths(std::size_t channels, const NormConfig& config) {
  if (config.stan_divisor == 0 || config.rescale_divisor == 0) throw ValidationError("asr: zero width divisor");
  const std::size_t c_stan = channels / config.stan_divisor;
  const std::size_t c_rescale = std::max<std::size_t>(1, channels / config.rescale_divisor);
  return {c_stan, c_rescale};
}

std::size_t norm_param_count(NormKind kind, std::size_t c, const NormConfig& config) {
  switch (kind) {
    case NormKind::None: return 0;
    case NormKind::BN:
    case NormKind::BNTest:
    case NormKind::IN:
    case NormKind::LN:
    case NormKind::GN: return 2 * c;
    case NormKind::SN: return 6 + 2 * c;
    case NormKind::ASR: {
      const auto [cs, cr] = asr_widths(c, config);
      const std::size_t stan = (c * cs + cs) + 2 * (cs * c + c);
      const std::size_t rescale = (c * cr + cr) + 2 * (cr * c + c);
      return stan + rescale + 2 + 2 * c + (config.pretrain_variant ? 2 : 0);
    }
  }
  return 0;
}

namespace {

// Fills a (rows, cols) weight with U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Param<T> glorot(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor<T> w(Shape{rows, cols});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(uniform(rng, -a, a));
  return Param<T>(name, std::move(w));
}

template <typename T>
Param<T> filled(const std::string& name, std::size_t n, double v) {
  return Param<T>(name, Tensor<T>(Shape{n}, static_cast<T>(v)));
}

}  // namespace

template <typename T>
NormLayer<T> init_norm(NormKind kind, std::size_t c, const NormConfig& config, std::uint64_t seed,
                       const std::string& prefix) {
  if (c == 0) throw ValidationError("norm layer needs at least one channel");
  switch (kind) {
    case NormKind::None: return NormLayer<T>(kind, c, std::monostate{});
    case NormKind::BN:
    case NormKind::BNTest: {
      BNState<T> s{filled<T>(prefix + "gamma", c, 1.0), filled<T>(prefix + "beta", c, 0.0), Tensor<T>(Shape{c}, T(0)),
                   Tensor<T>(Shape{c}, T(1)), config.momentum, config.eps};
      return NormLayer<T>(kind, c, std::move(s));
    }
    case NormKind::IN:
    case NormKind::LN:
    case NormKind::GN: {
      const std::size_t g = kind == NormKind::IN ? c : kind == NormKind::LN ? 1 : config.groups;
      if (g == 0 || c % g != 0) {
        throw ValidationError("group norm: " + std::to_string(g) + " groups do not divide " + std::to_string(c) +
                              " channels");
      }
      GroupState<T> s{g, filled<T>(prefix + "gamma", c, 1.0), filled<T>(prefix + "beta", c, 0.0), config.eps};
      return NormLayer<T>(kind, c, std::move(s));
    }
    case NormKind::SN: {
      SNState<T> s{filled<T>(prefix + "mean_logits", 3, 0.0),
                   filled<T>(prefix + "std_logits", 3, 0.0),
                   filled<T>(prefix + "gamma", c, 1.0),
                   filled<T>(prefix + "beta", c, 0.0),
                   Tensor<T>(Shape{c}, T(0)),
                   Tensor<T>(Shape{c}, T(1)),
                   config.sn_include_bn,
                   config.momentum,
                   config.eps};
      return NormLayer<T>(kind, c, std::move(s));
    }
    case NormKind::ASR: {
      if (c < 2) throw ValidationError("asr needs at least 2 channels");
      const auto [cs, cr] = asr_widths(c, config);
      if (cs == 0 || cs >= c) {
        throw ValidationError("asr: standardization width " + std::to_string(cs) + " must lie in [1, " +
                              std::to_string(c) + ")");
      }
      if (cr >= c) {
        throw ValidationError("asr: rescaling width " + std::to_string(cr) + " must be below " + std::to_string(c));
      }
      Rng rng(derive_seed(seed, "asr-init"));
      ASRState<T> s;
      s.channels = c;
      s.c_stan = cs;
      s.c_rescale = cr;
      s.stan_enc_w = glorot<T>(prefix + "stan_enc_w", cs, c, rng);
      s.stan_enc_b = filled<T>(prefix + "stan_enc_b", cs, 0.0);
      s.mu_dec_w = glorot<T>(prefix + "mu_dec_w", c, cs, rng);
      s.mu_dec_b = filled<T>(prefix + "mu_dec_b", c, 0.0);
      s.sigma_dec_w = glorot<T>(prefix + "sigma_dec_w", c, cs, rng);
      s.sigma_dec_b = filled<T>(prefix + "sigma_dec_b", c, 0.0);
      s.rescale_enc_w = glorot<T>(prefix + "rescale_enc_w", cr, c, rng);
      s.rescale_enc_b = filled<T>(prefix + "rescale_enc_b", cr, 0.0);
      s.beta_dec_w = glorot<T>(prefix + "beta_dec_w", c, cr, rng);
      s.beta_dec_b = filled<T>(prefix + "beta_dec_b", c, 0.0);
      s.gamma_dec_w = glorot<T>(prefix + "gamma_dec_w", c, cr, rng);
      s.gamma_dec_b = filled<T>(prefix + "gamma_dec_b", c, 0.0);
      s.rho_mu = filled<T>(prefix + "rho_mu", 1, config.residual_init);
      s.rho_sigma = filled<T>(prefix + "rho_sigma", 1, config.residual_init);
      s.gamma_bias = filled<T>(prefix + "gamma_bias", c, 1.0);
      s.beta_bias = filled<T>(prefix + "beta_bias", c, 0.0);
      s.pretrain_variant = config.pretrain_variant;
      if (s.pretrain_variant) {
        s.rho_beta = filled<T>(prefix + "rho_beta", 1, config.rescale_weight_init);
        s.rho_gamma = filled<T>(prefix + "rho_gamma", 1, config.rescale_weight_init);
      }
      s.eps = config.eps;
      return NormLayer<T>(kind, c, std::move(s));
    }
  }
  throw ValidationError("unhandled norm kind");
}

#define NORMSHIFT_INSTANTIATE_NORMS(T)                                                                  \
  template ChannelStats<T> channel_stats(Var<T>);                                                       \
  template Var<T> bn_forward(Var<T>, BNState<T>&, Mode);                                                \
  template Var<T> bn_test_forward(Var<T>, BNState<T>&);                                           \
  template Var<T> group_forward(Var<T>, GroupState<T>&);                                          \
  template Var<T> sn_forward(Var<T>, SNState<T>&, Mode);                                                \
  template StandardizeOutput<T> as_forward(Var<T>, ASRState<T>&);                                 \
  template RescaleOutput<T> ar_forward(Var<T>, Var<T>, Var<T>, ASRState<T>&);                     \
  template Var<T> asr_forward(Var<T>, ASRState<T>&, StatsProbe<T>*);                              \
  template ResidualWeights residual_weights(const ASRState<T>&);                                        \
  template class NormLayer<T>;                                                                          \
  template NormLayer<T> init_norm(NormKind, std::size_t, const NormConfig&, std::uint64_t, const std::string&);

NORMSHIFT_INSTANTIATE_NORMS(float)
NORMSHIFT_INSTANTIATE_NORMS(double)

}  // namespace normshift
