#include "normshift/augment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "normshift/parallel.hpp"

namespace normshift {

using nlohmann::json;

json to_json(const AdaConfig& c) {
  return json{{"eta", c.eta},
              {"step_size", c.step_size},
              {"inner_steps", c.inner_steps},
              {"aug_rounds", c.aug_rounds},
              {"interval", c.interval},
              {"clip", {c.clip_lo, c.clip_hi}},
              {"chunk", c.chunk}};
}

AdaConfig ada_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("ada: expected a JSON object");
  static const std::set<std::string> keys{"eta", "step_size", "inner_steps", "aug_rounds", "interval", "clip", "chunk"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ValidationError("unknown key 'ada." + key + "'");
  AdaConfig c;
  try {
    c.eta = j.value("eta", c.eta);
    c.step_size = j.value("step_size", c.step_size);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.aug_rounds = j.value("aug_rounds", c.aug_rounds);
    c.interval = j.value("interval", c.interval);
    c.chunk = j.value("chunk", c.chunk);
    if (j.contains("clip")) {
      auto clip = j.at("clip").get<std::vector<double>>();
      if (clip.size() != 2) throw ValidationError("ada.clip must be [lo, hi]");
      c.clip_lo = clip[0];
      c.clip_hi = clip[1];
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid value in ada section: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const AdaConfig& c) {
  if (!(c.eta >= 0)) throw ValidationError("ada.eta must be >= 0");
  if (!(c.step_size >= 0)) throw ValidationError("ada.step_size must be >= 0");
  if (c.aug_rounds > 0 && c.interval == 0) throw ValidationError("ada.interval must be positive");
  if (!(c.clip_lo < c.clip_hi)) throw ValidationError("ada.clip must satisfy lo < hi");
  if (c.chunk == 0) throw ValidationError("ada.chunk must be positive");
}

template <typename T>
double semantic_cost(const Tensor<T>& z, const Tensor<T>& z_src, std::int32_t y, std::int32_t y_src) {
  if (y != y_src) throw ValidationError("semantic cost is infinite across labels (" + std::to_string(y) + " vs " + std::to_string(y_src) + ")");
  if (z.shape() != z_src.shape()) {
    throw ShapeError("semantic_cost: shapes " + shape_str(z.shape()) + " and " + shape_str(z_src.shape()) + " differ");
  }
  double acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = static_cast<double>(z[i]) - static_cast<double>(z_src[i]);
    acc += d * d;
  }
  return 0.5 * acc;
}

template <typename T>
AugmentedSet<T> ada_maximize(Model<T>& model, const Tensor<T>& images, std::span<const std::int32_t> labels,
                             const AdaConfig& config, std::uint32_t round, std::span<const std::uint32_t> source_index) {
  validate(config);
  if (images.rank() != 4 || images.n() != labels.size()) {
    throw ShapeError("ada_maximize: " + shape_str(images.shape()) + " images with " + std::to_string(labels.size()) + " labels");
  }
  if (!source_index.empty() && source_index.size() != labels.size()) {
    throw ShapeError("ada_maximize: provenance indices do not match the batch");
  }
  if (model.config().fc_widths.empty() && config.eta != 0) {
    throw ValidationError("ada_maximize: semantic features need at least one hidden fc layer");
  }
  const std::size_t n = images.n();
  const std::size_t per = images.size() / std::max<std::size_t>(n, 1);
  AugmentedSet<T> out;
  out.images = images;
  out.labels.assign(labels.begin(), labels.end());
  out.provenance.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.provenance[i] = {round, source_index.empty() ? static_cast<std::uint32_t>(i) : source_index[i]};
  }
  if (config.inner_steps == 0 || config.step_size == 0 || n == 0) return out;

  const T lo = static_cast<T>(config.clip_lo), hi = static_cast<T>(config.clip_hi);
  const T alpha = static_cast<T>(config.step_size);
  const std::size_t chunks = (n + config.chunk - 1) / config.chunk;
  std::vector<std::size_t> reverted(chunks, 0);

  parallel_for(chunks, [&](std::size_t ci) {
    const std::size_t begin = ci * config.chunk, end = std::min(n, begin + config.chunk);
    const std::size_t m = end - begin;
    const Tensor<T> origin = images.slice_rows(begin, end);
    const std::span<const std::int32_t> y = labels.subspan(begin, m);
    for (auto l : y)
      if (l < 0 || static_cast<std::size_t>(l) >= model.config().classes) {
        throw ValidationError("ada_maximize: label " + std::to_string(l) + " out of range");
      }

    Tensor<T> z_src;
    if (config.eta != 0) {
      Tape<T> tape;
      tape.set_track_params(false);
      z_src = model.forward(tape, tape.constant(origin), Mode::Eval, true).features->value();
    }
    Tensor<T> x = origin;
    std::vector<bool> alive(m, true);
    for (std::size_t step = 0; step < config.inner_steps; ++step) {
      Tape<T> tape;
      tape.set_track_params(false);
      auto xv = tape.input(x);
      auto fwd = model.forward(tape, xv, Mode::Eval, config.eta != 0);
      auto objective = softmax_cross_entropy(fwd.logits, y, Reduction::Sum).loss;
      if (config.eta != 0) {
        objective = sub(objective, scale(half_squared_distance(*fwd.features, z_src), static_cast<T>(config.eta)));
      }
      tape.backward(objective);
      const Tensor<T> g = tape.grad(xv);
      for (std::size_t i = 0; i < m; ++i) {
        if (!alive[i]) continue;
        const T* gi = g.ptr() + i * per;
        if (!std::all_of(gi, gi + per, [](T v) { return std::isfinite(static_cast<double>(v)); })) {
          alive[i] = false;
          std::copy(origin.ptr() + i * per, origin.ptr() + (i + 1) * per, x.ptr() + i * per);
          std::cerr << "ada: non-finite input gradient for sample " << begin + i << ", keeping the original\n";
          continue;
        }
        T* xi = x.ptr() + i * per;
        for (std::size_t k = 0; k < per; ++k) xi[k] = std::clamp(static_cast<T>(xi[k] + alpha * gi[k]), lo, hi);
      }
    }
    std::copy(x.ptr(), x.ptr() + x.size(), out.images.ptr() + begin * per);
    reverted[ci] = static_cast<std::size_t>(std::count(alive.begin(), alive.end(), false));
  });
  for (auto r : reverted) out.reverted += r;
  return out;
}

template double semantic_cost(const Tensor<float>&, const Tensor<float>&, std::int32_t, std::int32_t);
template double semantic_cost(const Tensor<double>&, const Tensor<double>&, std::int32_t, std::int32_t);
template AugmentedSet<float> ada_maximize(Model<float>&, const Tensor<float>&, std::span<const std::int32_t>,
                                          const AdaConfig&, std::uint32_t, std::span<const std::uint32_t>);
template AugmentedSet<double> ada_maximize(Model<double>&, const Tensor<double>&, std::span<const std::int32_t>,
                                           const AdaConfig&, std::uint32_t, std::span<const std::uint32_t>);

}  // namespace normshift
