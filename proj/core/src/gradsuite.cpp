#include "normshift/gradsuite.hpp"

#include <algorithm>
#include <cmath>

#include "normshift/norms.hpp"
#include "normshift/rng.hpp"

namespace normshift {

namespace {

using D = double;

Tensor<D> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, lo, hi);
  return t;
}

// Pushes entries at least `gap` away from zero so relu kinks stay outside the FD stencil.
Tensor<D> away_from_zero(Tensor<D> t, double gap) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < gap) t[i] = t[i] < 0 ? t[i] - gap : t[i] + gap;
  }
  return t;
}

using LayerFn = std::function<Var<D>(Tape<D>&, Var<D>)>;

// Random-projection scalar of a layer output.
Var<D> project(Var<D> y, Tensor<D>& weights, Rng& rng) {
  if (weights.shape() != y.shape()) weights = random_tensor(y.shape(), rng);
  return sum(mul(y, y.tape->constant(weights)));
}

double check_layer(const LayerFn& layer, const Tensor<D>& x, const std::vector<Param<D>*>& params, Rng& rng) {
  Tensor<D> w;
  {
    Tape<D> tape;
    tape.set_track_params(false);
    project(layer(tape, tape.constant(x)), w, rng);
  }
  double worst = grad_check([&](Tape<D>& t, Var<D> v) { return project(layer(t, v), w, rng); }, x).max_rel_error;
  for (auto* p : params) {
    const auto r = grad_check_param(*p, [&](Tape<D>& t) { return project(layer(t, t.constant(x)), w, rng); });
    worst = std::max(worst, r.max_rel_error);
  }
  return worst;
}

void perturb(const std::vector<Param<D>*>& params, Rng& rng) {
  for (auto* p : params)
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] += uniform(rng, -0.3, 0.3);
}

LayerGradCheck norm_check(const std::string& name, NormKind kind, const NormConfig& cfg, std::size_t channels,
                          Mode mode, std::uint64_t seed, Rng& rng) {
  auto layer = init_norm<D>(kind, channels, cfg, seed);
  perturb(layer.params(), rng);
  const auto x = random_tensor(Shape{3, channels, 3, 3}, rng, -2.0, 2.0);
  return {name, check_layer([&](Tape<D>&, Var<D> v) { return layer.forward(v, mode); }, x, layer.params(), rng)};
}

}  // namespace

std::vector<LayerGradCheck> layer_gradcheck_suite(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-suite"));
  std::vector<LayerGradCheck> out;

  {
    Param<D> w("w", random_tensor(Shape{4, 3, 3, 3}, rng)), b("b", random_tensor(Shape{4}, rng));
    const auto x = random_tensor(Shape{2, 3, 5, 5}, rng);
    double err = check_layer([&](Tape<D>& t, Var<D> v) { return conv2d(v, t.param(w), t.param(b), 1, 1); }, x,
                             {&w, &b}, rng);
    err = std::max(err, check_layer([&](Tape<D>& t, Var<D> v) { return conv2d(v, t.param(w), t.param(b), 2, 0); }, x,
                                    {&w, &b}, rng));
    out.push_back({"conv", err});
  }
  {
    Param<D> w("w", random_tensor(Shape{4, 6}, rng)), b("b", random_tensor(Shape{4}, rng));
    const auto x = random_tensor(Shape{3, 6}, rng);
    out.push_back({"fc", check_layer([&](Tape<D>& t, Var<D> v) { return fully_connected(v, t.param(w), t.param(b)); },
                                     x, {&w, &b}, rng)});
  }
  {
    const auto x = random_tensor(Shape{2, 2, 4, 4}, rng);
    out.push_back({"pool", check_layer([](Tape<D>&, Var<D> v) { return maxpool2d(v, 2, 2); }, x, {}, rng)});
  }
  {
    const auto x = away_from_zero(random_tensor(Shape{3, 5}, rng), 0.05);
    out.push_back({"relu", check_layer([](Tape<D>&, Var<D> v) { return relu(v); }, x, {}, rng)});
  }
  {
    const auto x = random_tensor(Shape{4, 5}, rng, -2.0, 2.0);
    std::vector<std::int32_t> labels(4);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng() % 5);
    double err = 0;
    for (auto red : {Reduction::Mean, Reduction::Sum}) {
      err = std::max(err, grad_check([&](Tape<D>&, Var<D> v) { return softmax_cross_entropy(v, labels, red).loss; }, x)
                              .max_rel_error);
    }
    out.push_back({"cross_entropy", err});
  }

  NormConfig cfg;
  out.push_back(norm_check("bn", NormKind::BN, cfg, 4, Mode::Train, seed, rng));
  auto gn = cfg;
  gn.groups = 2;
  out.push_back(norm_check("gn", NormKind::GN, gn, 4, Mode::Train, seed, rng));
  out.push_back(norm_check("in", NormKind::IN, cfg, 4, Mode::Train, seed, rng));
  out.push_back(norm_check("ln", NormKind::LN, cfg, 4, Mode::Train, seed, rng));
  auto sn = cfg;
  sn.sn_include_bn = true;
  out.push_back(norm_check("sn", NormKind::SN, sn, 4, Mode::Train, seed, rng));

  // AS and AR separately, then the composed layer (and its pretrain variant).
  {
    auto layer = init_norm<D>(NormKind::ASR, 8, cfg, seed);
    perturb(layer.params(), rng);
    auto& st = std::get<ASRState<D>>(layer.state());
    const auto x = random_tensor(Shape{3, 8, 3, 3}, rng, -2.0, 2.0);
    std::vector<Param<D>*> as_params{&st.stan_enc_w, &st.stan_enc_b,    &st.mu_dec_w, &st.mu_dec_b,
                                     &st.sigma_dec_w, &st.sigma_dec_b, &st.rho_mu,   &st.rho_sigma};
    out.push_back({"as", check_layer([&](Tape<D>&, Var<D> v) { return as_forward(v, st).x_stan; }, x, as_params, rng)});
    std::vector<Param<D>*> ar_params{&st.rescale_enc_w, &st.rescale_enc_b, &st.beta_dec_w, &st.beta_dec_b,
                                     &st.gamma_dec_w,   &st.gamma_dec_b,   &st.gamma_bias, &st.beta_bias};
    out.push_back({"ar", check_layer(
                             [&](Tape<D>&, Var<D> v) {
                               auto s = channel_stats(v);
                               return ar_forward(v, s.mu, s.sigma, st).out;
                             },
                             x, ar_params, rng)});
  }
  out.push_back(norm_check("asr", NormKind::ASR, cfg, 8, Mode::Train, seed, rng));
  auto variant = cfg;
  variant.pretrain_variant = true;
  out.push_back(norm_check("asr_pretrain", NormKind::ASR, variant, 8, Mode::Train, seed, rng));
  return out;
}

}  // namespace normshift
