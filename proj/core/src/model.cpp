#include "normshift/model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "binary_io.hpp"
#include "normshift/rng.hpp"

namespace normshift {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ValidationError(section + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ValidationError("unknown key '" + (section.empty() ? key : section + "." + key) + "'");
  }
}

template <typename V>
void read_if(const json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError("invalid value for '" + section + "." + key + "'");
  }
}

}  // namespace

json to_json(const NormConfig& c) {
  return json{{"kind", std::string(norm_kind_name(c.kind))},
              {"groups", c.groups},
              {"sn_include_bn", c.sn_include_bn},
              {"pretrain_variant", c.pretrain_variant},
              {"eps", c.eps},
              {"momentum", c.momentum},
              {"stan_divisor", c.stan_divisor},
              {"rescale_divisor", c.rescale_divisor},
              {"residual_init", c.residual_init},
              {"rescale_weight_init", c.rescale_weight_init}};
}

NormConfig norm_config_from_json(const json& j) {
  reject_unknown(j,
                 {"kind", "groups", "sn_include_bn", "pretrain_variant", "eps", "momentum", "stan_divisor",
                  "rescale_divisor", "residual_init", "rescale_weight_init"},
                 "norm");
  NormConfig c;
  std::string kind(norm_kind_name(c.kind));
  read_if(j, "kind", kind, "norm");
  c.kind = parse_norm_kind(kind);
  read_if(j, "groups", c.groups, "norm");
  read_if(j, "sn_include_bn", c.sn_include_bn, "norm");
  read_if(j, "pretrain_variant", c.pretrain_variant, "norm");
  read_if(j, "eps", c.eps, "norm");
  read_if(j, "momentum", c.momentum, "norm");
  read_if(j, "stan_divisor", c.stan_divisor, "norm");
  read_if(j, "rescale_divisor", c.rescale_divisor, "norm");
  read_if(j, "residual_init", c.residual_init, "norm");
  read_if(j, "rescale_weight_init", c.rescale_weight_init, "norm");
  if (!(c.eps > 0)) throw ValidationError("norm.eps must be positive");
  if (!(c.momentum > 0 && c.momentum < 1)) throw ValidationError("norm.momentum must lie in (0,1)");
  return c;
}

json to_json(const ModelConfig& c) {
  return json{{"input", {c.in_channels, c.in_height, c.in_width}},
              {"conv_channels", c.conv_channels},
              {"kernel", c.kernel},
              {"pad", c.pad},
              {"pool", c.pool},
              {"fc_widths", c.fc_widths},
              {"classes", c.classes},
              {"norm", to_json(c.norm)},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"input", "conv_channels", "kernel", "pad", "pool", "fc_widths", "classes", "norm", "seed"},
                 "model");
  ModelConfig c;
  if (j.contains("input")) {
    std::vector<std::size_t> in;
    read_if(j, "input", in, "model");
    if (in.size() != 3) throw ValidationError("model.input must be [C,H,W]");
    c.in_channels = in[0];
    c.in_height = in[1];
    c.in_width = in[2];
  }
  read_if(j, "conv_channels", c.conv_channels, "model");
  read_if(j, "kernel", c.kernel, "model");
  read_if(j, "pad", c.pad, "model");
  read_if(j, "pool", c.pool, "model");
  read_if(j, "fc_widths", c.fc_widths, "model");
  read_if(j, "classes", c.classes, "model");
  read_if(j, "seed", c.seed, "model");
  if (j.contains("norm")) c.norm = norm_config_from_json(j.at("norm"));
  validate(c);
  return c;
}

std::pair<std::size_t, std::size_t> feature_map_size(const ModelConfig& c) {
  std::size_t h = c.in_height, w = c.in_width;
  for (std::size_t i = 0; i < c.conv_channels.size(); ++i) {
    if (h + 2 * c.pad < c.kernel || w + 2 * c.pad < c.kernel) {
      throw ValidationError("spatial dims collapse below 1 at conv layer " + std::to_string(i + 1));
    }
    h = h + 2 * c.pad - c.kernel + 1;
    w = w + 2 * c.pad - c.kernel + 1;
    if (h < c.pool || w < c.pool) {
      throw ValidationError("spatial dims collapse below 1 at pool layer " + std::to_string(i + 1));
    }
    h = (h - c.pool) / c.pool + 1;
    w = (w - c.pool) / c.pool + 1;
  }
  return {h, w};
}

void validate(const ModelConfig& c) {
  if (c.classes < 2) throw ValidationError("model.classes must be at least 2");
  if (c.in_channels == 0 || c.in_height == 0 || c.in_width == 0) throw ValidationError("model.input dims must be positive");
  if (c.kernel == 0 || c.pool == 0) throw ValidationError("model.kernel and model.pool must be positive");
  for (auto ch : c.conv_channels)
    if (ch == 0) throw ValidationError("model.conv_channels entries must be positive");
  for (auto wd : c.fc_widths)
    if (wd == 0) throw ValidationError("model.fc_widths entries must be positive");
  feature_map_size(c);
}

namespace {

template <typename T>
Param<T> uniform_param(const std::string& name, Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(rng, -bound, bound));
  return Param<T>(name, std::move(t));
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  validate(config_);
  Rng rng(derive_seed(config_.seed, "model-init"));
  std::size_t cin = config_.in_channels;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const std::size_t cout = config_.conv_channels[i];
    const std::string id = std::to_string(i + 1);
    const double fan_in = static_cast<double>(cin * config_.kernel * config_.kernel);
    conv_w_.push_back(uniform_param<T>("conv" + id + ".weight", Shape{cout, cin, config_.kernel, config_.kernel},
                                       std::sqrt(6.0 / fan_in), rng));
    conv_b_.emplace_back("conv" + id + ".bias", Tensor<T>(Shape{cout}));
    norms_.push_back(init_norm<T>(config_.norm.kind, cout, config_.norm, derive_seed(config_.seed, "norm", i),
                                  "norm" + id + "."));
    cin = cout;
  }
  const auto [h, w] = feature_map_size(config_);
  std::size_t din = cin * h * w;
  std::vector<std::size_t> widths = config_.fc_widths;
  widths.push_back(config_.classes);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string id = std::to_string(i + 1);
    const bool last = i + 1 == widths.size();
    const double bound = last ? std::sqrt(6.0 / static_cast<double>(din + widths[i]))
                              : std::sqrt(6.0 / static_cast<double>(din));
    fc_w_.push_back(uniform_param<T>("fc" + id + ".weight", Shape{widths[i], din}, bound, rng));
    fc_b_.emplace_back("fc" + id + ".bias", Tensor<T>(Shape{widths[i]}));
    din = widths[i];
  }
}

template <typename T>
ModelOutput<T> Model<T>::forward(Tape<T>& tape, Var<T> x, Mode mode, bool want_features,
                                 std::vector<StatsProbe<T>>* probes) {
  const Tensor<T>& xv = x.value();  // only valid until the tape grows
  if (xv.rank() != 4 || xv.c() != config_.in_channels || xv.h() != config_.in_height || xv.w() != config_.in_width) {
    throw ShapeError("model input " + shape_str(xv.shape()) + " does not match configured (N," +
                     std::to_string(config_.in_channels) + "," + std::to_string(config_.in_height) + "," +
                     std::to_string(config_.in_width) + ")");
  }
  const std::size_t n = xv.n();
  Var<T> h = x;
  const int pool = static_cast<int>(config_.pool);
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    h = conv2d(h, tape.param(conv_w_[i]), tape.param(conv_b_[i]), 1, static_cast<int>(config_.pad));
    StatsProbe<T> probe;
    const bool capture = probes && norms_[i].kind() == NormKind::ASR;
    h = norms_[i].forward(h, mode, capture ? &probe : nullptr);
    if (capture) probes->push_back(std::move(probe));
    h = maxpool2d(relu(h), pool, pool);
  }
  const std::size_t flat = h.value().size() / n;
  h = reshape(h, Shape{n, flat});
  ModelOutput<T> out;
  for (std::size_t i = 0; i + 1 < fc_w_.size(); ++i) {
    h = relu(fully_connected(h, tape.param(fc_w_[i]), tape.param(fc_b_[i])));
    if (i == 0 && want_features) out.features = h;
  }
  out.logits = fully_connected(h, tape.param(fc_w_.back()), tape.param(fc_b_.back()));
  if (want_features && !out.features) out.features = h;
  return out;
}

template <typename T>
std::vector<Param<T>*> Model<T>::params() {
  std::vector<Param<T>*> out;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    out.push_back(&conv_w_[i]);
    out.push_back(&conv_b_[i]);
    for (auto* p : norms_[i].params()) out.push_back(p);
  }
  for (std::size_t i = 0; i < fc_w_.size(); ++i) {
    out.push_back(&fc_w_[i]);
    out.push_back(&fc_b_[i]);
  }
  return out;
}

template <typename T>
std::vector<const Param<T>*> Model<T>::params() const {
  auto ps = const_cast<Model*>(this)->params();
  return {ps.begin(), ps.end()};
}

template <typename T>
std::vector<NamedBuffer<T>> Model<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  for (auto& n : norms_)
    for (auto& b : n.buffers()) out.push_back(b);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto* p : params()) total += p->value.size();
  return total;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

namespace {

template <typename U, typename T>
Param<U> cast_param(const Param<T>& p) {
  return Param<U>(p.name, p.value.template cast<U>());
}

template <typename U, typename T>
NormLayer<U> cast_norm(const NormLayer<T>& layer) {
  struct Visitor {
    NormState<U> operator()(const std::monostate&) const { return std::monostate{}; }
    NormState<U> operator()(const BNState<T>& s) const {
      return BNState<U>{cast_param<U>(s.gamma), cast_param<U>(s.beta), s.running_mean.template cast<U>(),
                        s.running_var.template cast<U>(), s.momentum, s.eps};
    }
    NormState<U> operator()(const GroupState<T>& s) const {
      return GroupState<U>{s.groups, cast_param<U>(s.gamma), cast_param<U>(s.beta), s.eps};
    }
    NormState<U> operator()(const SNState<T>& s) const {
      return SNState<U>{cast_param<U>(s.mean_logits), cast_param<U>(s.std_logits), cast_param<U>(s.gamma),
                        cast_param<U>(s.beta), s.running_mean.template cast<U>(), s.running_var.template cast<U>(),
                        s.include_bn, s.momentum, s.eps};
    }
    NormState<U> operator()(const ASRState<T>& s) const {
      ASRState<U> o;
      o.channels = s.channels;
      o.c_stan = s.c_stan;
      o.c_rescale = s.c_rescale;
      o.stan_enc_w = cast_param<U>(s.stan_enc_w);
      o.stan_enc_b = cast_param<U>(s.stan_enc_b);
      o.mu_dec_w = cast_param<U>(s.mu_dec_w);
      o.mu_dec_b = cast_param<U>(s.mu_dec_b);
      o.sigma_dec_w = cast_param<U>(s.sigma_dec_w);
      o.sigma_dec_b = cast_param<U>(s.sigma_dec_b);
      o.rescale_enc_w = cast_param<U>(s.rescale_enc_w);
      o.rescale_enc_b = cast_param<U>(s.rescale_enc_b);
      o.beta_dec_w = cast_param<U>(s.beta_dec_w);
      o.beta_dec_b = cast_param<U>(s.beta_dec_b);
      o.gamma_dec_w = cast_param<U>(s.gamma_dec_w);
      o.gamma_dec_b = cast_param<U>(s.gamma_dec_b);
      o.rho_mu = cast_param<U>(s.rho_mu);
      o.rho_sigma = cast_param<U>(s.rho_sigma);
      o.gamma_bias = cast_param<U>(s.gamma_bias);
      o.beta_bias = cast_param<U>(s.beta_bias);
      o.pretrain_variant = s.pretrain_variant;
      if (s.pretrain_variant) {
        o.rho_beta = cast_param<U>(s.rho_beta);
        o.rho_gamma = cast_param<U>(s.rho_gamma);
      }
      o.eps = s.eps;
      return o;
    }
  };
  return NormLayer<U>(layer.kind(), layer.channels(), std::visit(Visitor{}, layer.state()));
}

}  // namespace

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> m;
  m.config_ = config_;
  for (const auto& p : conv_w_) m.conv_w_.push_back(cast_param<U>(p));
  for (const auto& p : conv_b_) m.conv_b_.push_back(cast_param<U>(p));
  for (const auto& n : norms_) m.norms_.push_back(cast_norm<U>(n));
  for (const auto& p : fc_w_) m.fc_w_.push_back(cast_param<U>(p));
  for (const auto& p : fc_b_) m.fc_b_.push_back(cast_param<U>(p));
  return m;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

// Checkpoint layout (little-endian):
//   "NSCK" | u32 version | u32 len + JSON | u32 count |
//   count x (u16 len + name | u8 rank | u32 dims[rank] | f32 payload)
namespace {

constexpr char kCheckpointMagic[4] = {'N', 'S', 'C', 'K'};

void write_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xffff) throw ValidationError("tensor name too long: " + name);
  io::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  io::put_f32_array(os, t.ptr(), t.size());
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path, const json& meta,
                     const std::map<std::string, Tensor<float>>& extra) {
  auto& m = const_cast<Model<float>&>(model);
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (auto* p : m.params()) tensors.emplace_back(p->name, &p->value);
  for (auto& b : m.buffers()) tensors.emplace_back(b.name, b.tensor);
  for (const auto& [name, t] : extra) tensors.emplace_back("extra/" + name, &t);

  const std::string header = json{{"format", "normshift-checkpoint"}, {"model", to_json(model.config())}, {"meta", meta}}.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, 4);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) write_tensor(os, name, *t);
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  const std::string magic = io::get_bytes(is, 4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic) in " + path.string());
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = io::get<std::uint32_t>(is, "header length");
  const std::string header = io::get_bytes(is, hlen, "header");
  json hj;
  try {
    hj = json::parse(header);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!hj.contains("model")) throw FormatError("checkpoint header lacks the model config");
  Checkpoint ck;
  try {
    ck.model = Model<float>(model_config_from_json(hj.at("model")));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.meta = hj.value("meta", json::object());

  std::map<std::string, Tensor<float>*> slots;
  for (auto* p : ck.model.params()) slots[p->name] = &p->value;
  for (auto& b : ck.model.buffers()) slots[b.name] = b.tensor;
  std::set<std::string> seen;

  const auto count = io::get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = io::get<std::uint16_t>(is, "tensor name length");
    const std::string name = io::get_bytes(is, nlen, "tensor name");
    const auto rank = io::get<std::uint8_t>(is, "tensor rank");
    if (rank > 4) throw FormatError("tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = io::get<std::uint32_t>(is, "tensor dims");
    Tensor<float> t(shape);
    io::get_f32_array(is, t.ptr(), t.size(), "tensor payload");
    if (name.rfind("extra/", 0) == 0) {
      ck.extra.emplace(name.substr(6), std::move(t));
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint tensor '" + name + "' not part of the configured model");
    if (it->second->shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                        shape_str(it->second->shape()));
    }
    *it->second = std::move(t);
    seen.insert(name);
  }
  for (const auto& [name, _] : slots)
    if (!seen.count(name)) throw FormatError("checkpoint missing tensor '" + name + "'");
  for (auto* p : ck.model.params()) p->zero_grad();
  return ck;
}

}  // namespace normshift
