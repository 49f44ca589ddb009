#include "run_config.hpp"

#include <map>
#include <set>

#include "normshift/evalkit.hpp"

namespace normshift::cli {

using nlohmann::json;

namespace {

const std::map<std::string, std::set<std::string>> kSectionKeys{
    {"model", {"input", "conv_channels", "kernel", "pad", "pool", "fc_widths", "classes", "seed"}},
    {"norm",
     {"kind", "groups", "sn_include_bn", "pretrain_variant", "eps", "momentum", "stan_divisor", "rescale_divisor",
      "residual_init", "rescale_weight_init"}},
    {"train",
     {"optimizer", "lr", "momentum", "beta1", "beta2", "adam_eps", "batch_size", "epochs", "total_steps", "schedule",
      "seed", "eval_every"}},
    {"ada", {"enabled", "eta", "step_size", "inner_steps", "aug_rounds", "interval", "clip", "chunk"}},
    {"data", {"n", "seed", "classes", "spec"}},
    {"eval", {"n", "seed", "grid", "batch"}},
};

template <typename V>
void read(const json& section, const char* key, V& out, const std::string& name) {
  if (!section.contains(key)) return;
  try {
    out = section.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError("invalid value for '" + name + "." + key + "'");
  }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    if (key == "run_id") continue;
    auto it = kSectionKeys.find(key);
    if (it == kSectionKeys.end()) {
      unknown.push_back(key);
      continue;
    }
    if (!value.is_object()) throw ValidationError("section '" + key + "' must be a JSON object");
    for (const auto& [sub, _] : value.items())
      if (!it->second.count(sub)) unknown.push_back(key + "." + sub);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ValidationError(msg);
  }

  RunConfig rc;
  const json empty = json::object();
  auto section = [&](const char* name) -> const json& { return j.contains(name) ? j.at(name) : empty; };
  read(j, "run_id", rc.run_id, "config");
  if (rc.run_id.empty() || rc.run_id.find_first_of(",\n\r\"") != std::string::npos) {
    throw ValidationError("run_id must be non-empty and free of commas, quotes and newlines");
  }

  json model = section("model");
  model["norm"] = section("norm");
  rc.model = model_config_from_json(model);
  rc.train = train_config_from_json(section("train"));

  json ada = section("ada");
  bool enabled = false;
  read(ada, "enabled", enabled, "ada");
  ada.erase("enabled");
  const AdaConfig ada_cfg = ada_config_from_json(ada);
  if (enabled) rc.ada = ada_cfg;

  const json& data = section("data");
  read(data, "n", rc.data.n, "data");
  read(data, "seed", rc.data.seed, "data");
  read(data, "classes", rc.data.classes, "data");
  read(data, "spec", rc.data.spec, "data");
  parse_domain_spec(rc.data.spec);
  if (rc.data.classes < 2 || rc.data.classes > kMaxClasses) throw ValidationError("data.classes must lie in 2..10");
  if (rc.data.n < rc.data.classes) throw ValidationError("data.n must be at least data.classes");
  if (rc.data.classes != rc.model.classes) throw ValidationError("data.classes and model.classes differ");
  if (rc.model.in_channels != kImageChannels || rc.model.in_height != kImageSize || rc.model.in_width != kImageSize) {
    throw ValidationError("model.input must be [3,24,24] for generated data");
  }

  const json& ev = section("eval");
  read(ev, "n", rc.eval.n, "eval");
  read(ev, "seed", rc.eval.seed, "eval");
  read(ev, "batch", rc.eval.batch, "eval");
  if (ev.contains("grid")) {
    if (ev.at("grid").is_string()) rc.eval.grid = {ev.at("grid").get<std::string>()};
    else read(ev, "grid", rc.eval.grid, "eval");
  }
  if (rc.eval.n < rc.data.classes) throw ValidationError("eval.n must be at least data.classes");
  if (rc.eval.batch == 0) throw ValidationError("eval.batch must be positive");
  expand_grid(rc.eval.grid, rc.eval.seed);

  validate(rc.train, rc.model);
  return rc;
}

json resolved_json(const RunConfig& rc) {
  json model = to_json(rc.model);
  json norm = model["norm"];
  model.erase("norm");
  json ada = to_json(rc.ada.value_or(AdaConfig{}));
  ada["enabled"] = rc.ada.has_value();
  return json{{"run_id", rc.run_id},
              {"model", model},
              {"norm", norm},
              {"train", to_json(rc.train)},
              {"ada", ada},
              {"data", {{"n", rc.data.n}, {"seed", rc.data.seed}, {"classes", rc.data.classes}, {"spec", rc.data.spec}}},
              {"eval", {{"n", rc.eval.n}, {"seed", rc.eval.seed}, {"grid", rc.eval.grid}, {"batch", rc.eval.batch}}}};
}

std::vector<DomainSpec> expand_grid(const std::vector<std::string>& grid, std::uint64_t seed) {
  std::vector<DomainSpec> specs;
  for (const auto& g : grid) {
    if (g == "corruption") {
      auto c = corruption_grid(seed);
      specs.insert(specs.end(), c.begin(), c.end());
    } else if (g == "styles") {
      for (auto s : kStyleNames) specs.push_back(DomainSpec{DomainKind::Style, std::string(s), 0, seed});
    } else {
      specs.push_back(parse_domain_spec(g, seed));
    }
  }
  if (specs.empty()) throw ValidationError("evaluation grid is empty");
  return specs;
}

}  // namespace normshift::cli
