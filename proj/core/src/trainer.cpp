#include "normshift/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>

#include "normshift/rng.hpp"

namespace normshift {

using nlohmann::json;

json to_json(const TrainConfig& c) {
  return json{{"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
              {"lr", c.lr},
              {"momentum", c.momentum},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"total_steps", c.total_steps},
              {"schedule", c.schedule == LrSchedule::Cosine ? "cosine" : "constant"},
              {"seed", c.seed},
              {"eval_every", c.eval_every}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("train: expected a JSON object");
  static const std::set<std::string> keys{"optimizer", "lr",     "momentum",    "beta1",    "beta2", "adam_eps",
                                          "batch_size", "epochs", "total_steps", "schedule", "seed",  "eval_every"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ValidationError("unknown key 'train." + key + "'");
  TrainConfig c;
  try {
    const auto opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") c.optimizer = OptimizerKind::Adam;
    else if (opt == "sgd") c.optimizer = OptimizerKind::SGD;
    else throw ValidationError("train.optimizer must be 'adam' or 'sgd', got '" + opt + "'");
    const auto sched = j.value("schedule", std::string("constant"));
    if (sched == "constant") c.schedule = LrSchedule::Constant;
    else if (sched == "cosine") c.schedule = LrSchedule::Cosine;
    else throw ValidationError("train.schedule must be 'constant' or 'cosine', got '" + sched + "'");
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid value in train section: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0)) throw ValidationError("train.lr must be positive");
  if (c.batch_size == 0) throw ValidationError("train.batch_size must be positive");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ValidationError("train.momentum must lie in [0,1)");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) {
    throw ValidationError("train.beta1 and train.beta2 must lie in [0,1)");
  }
  if (!(c.adam_eps > 0)) throw ValidationError("train.adam_eps must be positive");
}

void validate(const TrainConfig& c, const ModelConfig& m) {
  validate(c);
  const auto k = m.norm.kind;
  const bool batch_stats = k == NormKind::BN || k == NormKind::BNTest || (k == NormKind::SN && m.norm.sn_include_bn);
  if (batch_stats && !m.conv_channels.empty() && c.batch_size < 2) {
    throw ValidationError("train.batch_size must be at least 2 with batch statistics (norm '" +
                          std::string(norm_kind_name(k)) + "')");
  }
}

double learning_rate(const TrainConfig& c, std::size_t step, std::size_t total) {
  if (c.schedule == LrSchedule::Constant || total == 0) return c.lr;
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

namespace {

template <typename T>
void check_grads(std::span<Param<T>* const> params) {
  for (const auto* p : params) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(static_cast<double>(p->grad[i]))) {
        throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
      }
    }
  }
}

template <typename T>
void ensure_state(std::vector<Tensor<T>>& state, std::span<Param<T>* const> params) {
  if (state.size() == params.size()) return;
  state.clear();
  for (const auto* p : params) state.emplace_back(p->value.shape());
}

}  // namespace

template <typename T>
void Sgd<T>::step(std::span<Param<T>* const> params, double lr) {
  check_grads(params);
  ensure_state(velocity_, params);
  const T mom = static_cast<T>(momentum_), rate = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      v[i] = mom * v[i] + p.grad[i];
      p.value[i] -= rate * v[i];
    }
    p.zero_grad();
  }
}

template <typename T>
void Adam<T>::step(std::span<Param<T>* const> params, double lr) {
  check_grads(params);
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      p.value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
    p.zero_grad();
  }
}

template class Sgd<float>;
template class Sgd<double>;
template class Adam<float>;
template class Adam<double>;

std::size_t planned_steps(const TrainConfig& c, std::size_t n_source) {
  if (c.total_steps > 0) return c.total_steps;
  return c.epochs * ((n_source + c.batch_size - 1) / c.batch_size);
}

namespace {

// Originals followed by appended augmented samples, addressed by index.
class SamplePool {
 public:
  explicit SamplePool(const Dataset& source)
      : source_(source), per_(source.images.size() / std::max<std::size_t>(source.size(), 1)) {}

  std::size_t size() const { return source_.size() + extra_labels_.size(); }

  void append(const Tensor<float>& images, std::span<const std::int32_t> labels) {
    extra_.insert(extra_.end(), images.ptr(), images.ptr() + images.size());
    extra_labels_.insert(extra_labels_.end(), labels.begin(), labels.end());
  }

  void gather(std::span<const std::size_t> idx, Tensor<float>& images, std::vector<std::int32_t>& labels) const {
    Shape shape = source_.images.shape();
    shape[0] = idx.size();
    images = Tensor<float>(shape);
    labels.resize(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t i = idx[b];
      const float* src;
      if (i < source_.size()) {
        src = source_.images.ptr() + i * per_;
        labels[b] = source_.labels[i];
      } else {
        src = extra_.data() + (i - source_.size()) * per_;
        labels[b] = extra_labels_[i - source_.size()];
      }
      std::copy(src, src + per_, images.ptr() + b * per_);
    }
  }

 private:
  const Dataset& source_;
  std::size_t per_;
  std::vector<float> extra_;
  std::vector<std::int32_t> extra_labels_;
};

json run_meta(const TrainConfig& c, const std::optional<AdaConfig>& ada, std::size_t step) {
  json meta{{"train", to_json(c)}, {"step", step}};
  if (ada) meta["ada"] = to_json(*ada);
  return meta;
}

}  // namespace

TrainResult train(Model<float>& model, const Dataset& source, const TrainConfig& config,
                  const std::optional<AdaConfig>& ada, const TrainOptions& options) {
  validate(config, model.config());
  if (ada) validate(*ada);
  if (source.size() == 0) throw ValidationError("train: empty source dataset");
  if (source.images.rank() != 4) throw ShapeError("train: source images must be (N,C,H,W)");

  TrainResult result;
  const std::size_t total = planned_steps(config, source.size());
  const Dataset& eval_set = options.eval_set ? *options.eval_set : source;
  const DomainSpec source_spec{};
  SamplePool pool(source);
  const auto params = model.params();
  Sgd<float> sgd(config.momentum);
  Adam<float> adam(config.beta1, config.beta2, config.adam_eps);

  model.zero_grad();
  const bool has_asr = std::any_of(model.norms().begin(), model.norms().end(),
                                   [](const auto& l) { return l.kind() == NormKind::ASR; });
  if (has_asr) log_residual_weights(model, 0, result.trajectory);

  std::vector<std::size_t> order;
  std::size_t cursor = 0, epoch = 0;
  Tensor<float> batch;
  std::vector<std::int32_t> labels;

  auto cadence = [&](std::size_t step) {
    result.metrics.push_back(evaluate(model, eval_set, source_spec));
    result.metric_runs.push_back(options.run_id + ":step=" + std::to_string(step));
    if (has_asr && step > 0) log_residual_weights(model, step, result.trajectory);
    if (options.verbose) {
      std::cerr << "step " << step << "/" << total << " acc " << format_double(result.metrics.back().accuracy) << "\n";
    }
  };

  for (std::size_t step = 0; step < total; ++step) {
    if (cursor >= order.size() || order.size() - cursor < std::min<std::size_t>(2, config.batch_size)) {
      order.resize(pool.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(config.seed, "epoch", epoch++));
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
      }
      cursor = 0;
    }
    const std::size_t take = std::min(config.batch_size, order.size() - cursor);
    pool.gather(std::span(order).subspan(cursor, take), batch, labels);
    cursor += take;

    Tape<float> tape;
    auto out = model.forward(tape, tape.constant(batch), Mode::Train);
    auto loss = softmax_cross_entropy(out.logits, labels, Reduction::Mean).loss;
    const double lv = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(lv)) {
      model.zero_grad();
      if (!options.checkpoint_path.empty()) save_checkpoint(model, options.checkpoint_path, run_meta(config, ada, step));
      throw NumericalError("training loss is not finite at step " + std::to_string(step));
    }
    result.losses.push_back(lv);
    tape.backward(loss);
    const double lr = learning_rate(config, step, total);
    if (config.optimizer == OptimizerKind::Adam) adam.step(params, lr);
    else sgd.step(params, lr);
    const std::size_t done = step + 1;
    result.steps = done;

    if (ada && result.aug_round_steps.size() < ada->aug_rounds && done % ada->interval == 0) {
      const auto round = static_cast<std::uint32_t>(result.aug_round_steps.size() + 1);
      auto aug = ada_maximize(model, source.images, source.labels, *ada, round);
      pool.append(aug.images, aug.labels);
      result.aug_round_steps.push_back(done);
      if (options.verbose) std::cerr << "ada round " << round << " at step " << done << ", pool " << pool.size() << "\n";
    }
    if ((config.eval_every > 0 && done % config.eval_every == 0) || done == total) cadence(done);
  }
  result.pool_size = pool.size();
  if (!options.checkpoint_path.empty()) save_checkpoint(model, options.checkpoint_path, run_meta(config, ada, result.steps));
  return result;
}

}  // namespace normshift
