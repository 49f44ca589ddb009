// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is 0 only when the failing criteria are exactly those listed
// with --known-failures (none by default).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cli.hpp"
#include "normshift/augment.hpp"
#include "normshift/datagen.hpp"
#include "normshift/evalkit.hpp"
#include "normshift/gradsuite.hpp"
#include "normshift/model.hpp"
#include "normshift/rng.hpp"
#include "normshift/trainer.hpp"

namespace fs = std::filesystem;
using namespace normshift;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
Tensor<T> noise(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

template <typename T>
Tensor<T> norm_out(NormLayer<T>& layer, const Tensor<T>& x, Mode mode) {
  Tape<T> t;
  return layer.forward(t.constant(x), mode).value();
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  Shape s = parts.at(0).shape();
  s[0] = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    s[0] += p.dim(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>(s, std::move(data));
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_layer;
  std::set<std::string> layers;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& r : layer_gradcheck_suite(seed)) {
      layers.insert(r.layer);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_layer = r.layer;
      }
    }
  }
  const double secs = seconds_since(t0);
  std::set<std::string> need{"conv", "fc", "pool", "relu", "cross_entropy", "bn", "gn", "in", "ln", "sn", "as", "ar", "asr"};
  std::string missing;
  for (const auto& n : need) {
    const bool found = layers.count(n) > 0;
    if (!found) missing += " " + n;
  }
  const bool pass = worst < 1e-5 && secs < 120 && missing.empty();
  return {pass, std::to_string(layers.size()) + " layer checks x 5 seeds, max rel error " + fmt("%.2e", worst) + " (" +
                    worst_layer + "), " + fmt("%.1f", secs) + " s" + (missing.empty() ? "" : ", missing:" + missing)};
}

// ---------------------------------------------------------------- 2

template <typename T>
double reduction_gap(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t c = 2 * (1 + rng() % 8), n = 2 + rng() % 4, h = 1 + rng() % 6, w = 1 + rng() % 6;
  const auto x = noise<T>(Shape{n, c, h, w}, seed, -3.0, 3.0);
  const NormConfig base;
  double gap = 0;
  auto track = [&](const Tensor<T>& a, const Tensor<T>& b) { gap = std::max(gap, static_cast<double>(max_abs_diff(a, b))); };

  auto in = init_norm<T>(NormKind::IN, c, base, seed);
  auto ln = init_norm<T>(NormKind::LN, c, base, seed);
  auto bn = init_norm<T>(NormKind::BN, c, base, seed);
  const auto y_in = norm_out(in, x, Mode::Train), y_ln = norm_out(ln, x, Mode::Train);

  // adaptive standardization with both residual weights at 0
  auto asr = init_norm<T>(NormKind::ASR, c, base, seed);
  auto& as = std::get<ASRState<T>>(asr.state());
  as.rho_mu.value[0] = T(-1000);
  as.rho_sigma.value[0] = T(-1000);
  {
    Tape<T> t;
    track(as_forward(t.constant(x), as).x_stan.value(), y_in);
  }

  NormConfig g_c = base, g_1 = base;
  g_c.groups = c;
  g_1.groups = 1;
  auto gn_c = init_norm<T>(NormKind::GN, c, g_c, seed), gn_1 = init_norm<T>(NormKind::GN, c, g_1, seed);
  track(norm_out(gn_c, x, Mode::Train), y_in);
  track(norm_out(gn_1, x, Mode::Train), y_ln);

  NormConfig with_bn = base;
  with_bn.sn_include_bn = true;
  const Tensor<T> y_bn = norm_out(bn, x, Mode::Train);
  const Tensor<T>* refs[3] = {&y_bn, &y_in, &y_ln};
  for (std::size_t hot = 0; hot < 3; ++hot) {
    auto sn = init_norm<T>(NormKind::SN, c, with_bn, seed);
    auto& s = std::get<SNState<T>>(sn.state());
    for (std::size_t k = 0; k < 3; ++k) {
      s.mean_logits.value[k] = k == hot ? T(1000) : T(0);
      s.std_logits.value[k] = k == hot ? T(1000) : T(0);
    }
    track(norm_out(sn, x, Mode::Train), *refs[hot]);
  }
  return gap;
}

Outcome reduction_equivalences() {
  double worst32 = 0, worst64 = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    worst32 = std::max(worst32, reduction_gap<float>(seed));
    worst64 = std::max(worst64, reduction_gap<double>(seed));
  }
  return {worst32 <= 1e-6 && worst64 <= 1e-6, "AS(lambda=0)=IN, GN(C)=IN, GN(1)=LN, saturated SN=BN/IN/LN over 20 random "
                                              "tensors: max abs diff " +
                                                  fmt("%.2e", worst32) + " (float32), " + fmt("%.2e", worst64) +
                                                  " (float64)"};
}

// ---------------------------------------------------------------- 3

Outcome sample_independence() {
  double worst = 0;
  bool bitwise = true;
  std::string broken;
  for (NormKind kind : {NormKind::IN, NormKind::LN, NormKind::GN, NormKind::SN, NormKind::ASR}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const std::size_t c = 4 * (1 + rng() % 4), n = 2 + rng() % 5, hw = 2 + rng() % 6;
      NormConfig cfg;
      cfg.groups = 2;
      auto layer = init_norm<float>(kind, c, cfg, seed);
      const auto x = noise<float>(Shape{n, c, hw, hw}, seed + 7, -2.0, 2.0);
      const auto batch = norm_out(layer, x, Mode::Train);
      std::vector<Tensor<float>> parts;
      for (std::size_t i = 0; i < n; ++i) parts.push_back(norm_out(layer, x.slice_rows(i, i + 1), Mode::Train));
      worst = std::max(worst, static_cast<double>(max_abs_diff(batch, stack(parts))));
      if (!(batch == norm_out(layer, x, Mode::Eval))) {
        bitwise = false;
        broken = std::string(norm_kind_name(kind));
      }
    }
  }
  auto bn = init_norm<float>(NormKind::BN, 8, NormConfig{}, 3);
  const auto x = noise<float>(Shape{6, 8, 4, 4}, 99, -2.0, 2.0);
  const auto whole = norm_out(bn, x, Mode::Train);
  const auto split = stack<float>({norm_out(bn, x.slice_rows(0, 3), Mode::Train), norm_out(bn, x.slice_rows(3, 6), Mode::Train)});
  const double bn_gap = max_abs_diff(whole, split);
  const bool pass = worst <= 1e-6 && bitwise && bn_gap > 1e-3;
  return {pass, "IN/LN/GN/SN/ASR batch vs per-sample max diff " + fmt("%.2e", worst) + ", train==eval bitwise: " +
                    (bitwise ? "yes" : "no (" + broken + ")") + "; BN split-batch diff " + fmt("%.3f", bn_gap)};
}

// ---------------------------------------------------------------- 4

double ce_sum(Model<double>& m, const Tensor<double>& x, std::span<const std::int32_t> y) {
  Tape<double> t;
  t.set_track_params(false);
  return softmax_cross_entropy(m.forward(t, t.constant(x), Mode::Eval).logits, y, Reduction::Sum).loss.value()[0];
}

double mean_ce(Model<float>& m, const Tensor<float>& x, std::span<const std::int32_t> y) {
  Tape<float> t;
  t.set_track_params(false);
  return softmax_cross_entropy(m.forward(t, t.constant(x), Mode::Eval).logits, y, Reduction::Mean).loss.value()[0];
}

Outcome ada_mechanics() {
  std::vector<std::string> notes;
  bool pass = true;

  // alpha = 0 leaves every image bitwise unchanged
  {
    Model<float> m(ModelConfig{});
    const auto ds = gen_source(11, 40, 10);
    AdaConfig c;
    c.step_size = 0;
    const bool same = ada_maximize(m, ds.images, ds.labels, c).images == ds.images;
    pass = pass && same;
    notes.push_back(std::string("alpha=0 identity ") + (same ? "bitwise" : "BROKEN"));
  }

  // one eta=0 step equals alpha times the finite-difference input gradient
  {
    ModelConfig mc;
    mc.norm.kind = NormKind::ASR;
    Model<double> m = Model<float>(mc).cast<double>();
    const std::vector<std::int32_t> y{0, 3, 7};
    const auto x0 = noise<double>(Shape{3, 3, 24, 24}, 5, 0.2, 0.8);
    AdaConfig c;
    c.eta = 0;
    c.inner_steps = 1;
    c.step_size = 1e-3;
    c.clip_lo = -1e9;
    c.clip_hi = 1e9;
    const auto x1 = ada_maximize(m, x0, y, c).images;
    Rng rng(17);
    double worst = 0;
    for (int k = 0; k < 60; ++k) {
      const std::size_t i = rng() % x0.size();
      auto xp = x0, xm = x0;
      const double h = 1e-6;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (ce_sum(m, xp, y) - ce_sum(m, xm, y)) / (2 * h);
      const double step = (x1[i] - x0[i]) / c.step_size;
      worst = std::max(worst, std::abs(step - fd) / std::max(1.0, std::abs(fd)));
    }
    pass = pass && worst < 1e-4;
    notes.push_back("one-step vs finite difference " + fmt("%.2e", worst));
  }

  // on a trained desk model, 25 ascent steps raise the loss and larger eta
  // keeps the features closer to the source
  {
    ModelConfig mc;
    mc.norm.kind = NormKind::BN;
    Model<float> m(mc);
    TrainConfig tc;
    tc.epochs = 2;
    train(m, gen_source(21, 2000, 10), tc);
    const auto held = gen_source(22, 640, 10);
    AdaConfig c;
    c.eta = 0;
    std::size_t up = 0, batches = 0;
    for (std::size_t b = 0; b + 32 <= held.size(); b += 32, ++batches) {
      const auto x = held.images.slice_rows(b, b + 32);
      const std::span<const std::int32_t> y(held.labels.data() + b, 32);
      const auto aug = ada_maximize(m, x, y, c);
      up += mean_ce(m, aug.images, y) > mean_ce(m, x, y);
    }
    const double frac = static_cast<double>(up) / static_cast<double>(batches);
    pass = pass && frac >= 0.9;
    notes.push_back("loss up on " + std::to_string(up) + "/" + std::to_string(batches) + " batches");

    const auto x = held.images.slice_rows(0, 128);
    const std::span<const std::int32_t> y(held.labels.data(), 128);
    Tape<float> t0;
    t0.set_track_params(false);
    const auto z_src = m.forward(t0, t0.constant(x), Mode::Eval, true).features->value();
    std::vector<double> dist;
    for (double eta : {0.0, 1.0, 10.0, 100.0}) {
      AdaConfig ce;
      ce.eta = eta;
      const auto aug = ada_maximize(m, x, y, ce);
      Tape<float> t;
      t.set_track_params(false);
      const auto z = m.forward(t, t.constant(aug.images), Mode::Eval, true).features->value();
      dist.push_back(semantic_cost(z, z_src, 0, 0) / 128.0);
    }
    bool mono = true;
    for (std::size_t i = 1; i < dist.size(); ++i) mono = mono && dist[i] <= dist[i - 1];
    pass = pass && mono;
    std::string d;
    for (double v : dist) d += (d.empty() ? "" : " >= ") + fmt("%.4g", v);
    notes.push_back("semantic distance over eta {0,1,10,100}: " + d + (mono ? "" : " (NOT monotone)"));
  }
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {pass, detail};
}

// ---------------------------------------------------------------- 5, 6, 7

struct DeskRun {
  std::string name;
  EvalReport report;
  TrajectoryLog trajectory;
};

struct DeskResults {
  std::map<std::string, std::vector<DeskRun>> runs;  // by variant, one per seed
  double seconds = 0;
};

// Desk schedule: 5000 images, 10 epochs of batch 32 (1570 steps). ADA keeps
// the default ascent (25 steps, eta 1, alpha 1) and places its three rounds
// every 400 steps so they all land inside the short run.
DeskResults run_desk_experiment(const fs::path& dir) {
  DeskResults out;
  const auto t0 = Clock::now();
  const auto specs = corruption_grid(1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto source = gen_source(seed, 5000, 10);
    for (const char* variant : {"erm-bn", "erm-asr", "ada-bn", "ada-asr"}) {
      const bool asr = std::strstr(variant, "asr") != nullptr, ada = variant[1] == 'd';
      ModelConfig mc;
      mc.seed = seed;
      mc.norm.kind = asr ? NormKind::ASR : NormKind::BN;
      TrainConfig tc;
      tc.epochs = 10;
      tc.seed = seed;
      std::optional<AdaConfig> ac;
      if (ada) {
        ac = AdaConfig{};
        ac->interval = 400;
      }
      Model<float> model(mc);
      const auto t_run = Clock::now();
      auto result = train(model, source, tc, ac);
      DeskRun run{std::string(variant) + "-s" + std::to_string(seed), evaluate_grid(model, specs, 1000), result.trajectory};
      append_metrics_csv(dir / "desk-metrics.csv", run.name, run.report.rows);
      if (!run.trajectory.empty()) run.trajectory.write(dir / (run.name + "-trajectory.csv"));
      std::cerr << "  desk run " << run.name << ": " << fmt("%.0f", seconds_since(t_run)) << " s, level-5 accuracy "
                << fmt("%.4f", run.report.level_averages.back().accuracy) << "\n";
      out.runs[variant].push_back(std::move(run));
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

// Seed-averaged corruption accuracy (or Brier) at each level 1..5.
std::vector<double> level_means(const std::vector<DeskRun>& runs, bool brier = false) {
  std::vector<double> m(5, 0.0);
  for (const auto& r : runs)
    for (const auto& l : r.report.level_averages)
      m.at(static_cast<std::size_t>(l.level - 1)) += (brier ? l.brier : l.accuracy) / static_cast<double>(runs.size());
  return m;
}

std::string pct_list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.1f", 100 * x);
  return s;
}

Outcome directional(const DeskResults& d) {
  const auto erm_bn = level_means(d.runs.at("erm-bn")), erm_asr = level_means(d.runs.at("erm-asr"));
  const auto ada_bn = level_means(d.runs.at("ada-bn")), ada_asr = level_means(d.runs.at("ada-asr"));
  const double gap5 = erm_asr[4] - erm_bn[4];
  double avg_bn = 0, avg_asr = 0;
  std::vector<double> gaps;
  for (std::size_t l = 0; l < 5; ++l) {
    avg_bn += ada_bn[l] / 5;
    avg_asr += ada_asr[l] / 5;
    gaps.push_back(ada_asr[l] - ada_bn[l]);
  }
  bool non_decreasing = true;
  for (std::size_t l = 1; l < 5; ++l) non_decreasing = non_decreasing && gaps[l] >= gaps[l - 1];
  const bool a = gap5 >= 0.02, b = avg_asr - avg_bn >= 0.01 && non_decreasing, fast = d.seconds <= 1800;
  return {a && b && fast, "(a) ERM level-5 ASR-BN " + fmt("%+.1f", 100 * gap5) + " pts [" + (a ? "ok" : "FAIL") +
                              "]; (b) ADA 5-level avg ASR-BN " + fmt("%+.1f", 100 * (avg_asr - avg_bn)) +
                              " pts, gap by level " + pct_list(gaps) + (non_decreasing ? " non-decreasing" : " NOT monotone") +
                              " [" + (b ? "ok" : "FAIL") + "]; runtime " + fmt("%.0f", d.seconds) + " s [" +
                              (fast ? "ok" : "FAIL") + "]"};
}

Outcome residual_growth(const DeskResults& d) {
  const auto& traj = d.runs.at("ada-asr").at(0).trajectory.rows();
  if (traj.empty()) return {false, "no trajectory recorded"};
  std::map<std::size_t, ResidualWeights> first, last;
  for (const auto& r : traj) {
    if (!first.count(r.layer)) first[r.layer] = r.weights;
    last[r.layer] = r.weights;
  }
  const double init = 1.0 / (1.0 + std::exp(3.0));
  double mu = 0, sigma = 0;
  bool per_layer = true;
  std::string layers;
  for (const auto& [layer, w] : last) {
    mu += w.lambda_mu / static_cast<double>(last.size());
    sigma += w.lambda_sigma / static_cast<double>(last.size());
    per_layer = per_layer && w.lambda_sigma > first[layer].lambda_mu;
    layers += " L" + std::to_string(layer) + "(mu " + fmt("%.4f", w.lambda_mu) + ", sigma " + fmt("%.4f", w.lambda_sigma) + ")";
  }
  const bool pass = mu > init && sigma > init && per_layer;
  return {pass, "final mean lambda_mu " + fmt("%.5f", mu) + ", lambda_sigma " + fmt("%.5f", sigma) + " vs init " +
                    fmt("%.6f", init) + ";" + layers};
}

Outcome calibration(const DeskResults& d) {
  const double bn = level_means(d.runs.at("ada-bn"), true)[4], asr = level_means(d.runs.at("ada-asr"), true)[4];
  return {asr <= bn, "level-5 mean Brier ADA+ASR " + fmt("%.4f", asr) + " vs ADA+BN " + fmt("%.4f", bn)};
}

// ---------------------------------------------------------------- 8

Outcome brier_units() {
  std::vector<double> onehot(10, 0.0), uniform_p(10, 0.1), worst(10, 0.0);
  onehot[2] = 1.0;
  worst[5] = 1.0;
  const double a = brier(onehot, 2), b = brier(uniform_p, 2), c = brier(worst, 2);
  const bool pass = a == 0.0 && b == 0.09 && c == 0.2;
  return {pass, "one-hot " + fmt("%.17g", a) + ", uniform " + fmt("%.17g", b) + ", worst " + fmt("%.17g", c)};
}

// ---------------------------------------------------------------- 9

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "normshift");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  std::streambuf* saved = std::cout.rdbuf();
  std::ostringstream sink;
  std::cout.rdbuf(sink.rdbuf());
  const int rc = cli::run(static_cast<int>(args.size()), argv.data());
  std::cout.rdbuf(saved);
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome determinism(const fs::path& dir) {
  const auto cfg = dir / "determinism.json";
  std::ofstream(cfg) << R"({"run_id":"det","norm":{"kind":"asr"},"train":{"epochs":2,"eval_every":20,"seed":4},
 "ada":{"enabled":true,"interval":25,"inner_steps":5},"data":{"n":600,"seed":4},"eval":{"n":100}})";
  fs::remove_all(dir / "det-a");
  fs::remove_all(dir / "det-b");
  const int ra = run_cli({"train", "--config", cfg.string(), "--out-dir", (dir / "det-a").string()});
  const int rb = run_cli({"train", "--config", cfg.string(), "--out-dir", (dir / "det-b").string()});
  if (ra != 0 || rb != 0) return {false, "train exited with " + std::to_string(ra) + "/" + std::to_string(rb)};
  std::string detail;
  bool pass = true;
  for (const char* f : {"metrics.csv", "checkpoint.nsck", "trajectory.csv"}) {
    const auto a = slurp(dir / "det-a" / f), b = slurp(dir / "det-b" / f);
    const bool same = !a.empty() && a == b;
    pass = pass && same;
    detail += std::string(detail.empty() ? "" : ", ") + f + " " + std::to_string(a.size()) + " bytes " +
              (same ? "identical" : "DIFFER");
  }
  return {pass, "ADA+ASR run repeated: " + detail};
}

// ---------------------------------------------------------------- 10

// Independent closed form for one ASR layer over C channels, minus the two
// per-channel affine vectors BN would have had.
std::size_t asr_overhead_closed_form(std::size_t c) {
  const std::size_t cs = c / 2, cr = std::max<std::size_t>(1, c / 16);
  const std::size_t standardization = (c * cs + cs) + 2 * (cs * c + c);
  const std::size_t rescaling = (c * cr + cr) + 2 * (cr * c + c);
  const std::size_t residual = 2, biases = 2 * c;
  return standardization + rescaling + residual + biases - 2 * c;
}

Outcome parameter_accounting() {
  ModelConfig bn_cfg, asr_cfg;
  asr_cfg.norm.kind = NormKind::ASR;
  const Model<float> bn(bn_cfg), asr(asr_cfg);
  const std::size_t reported = asr.parameter_count() - bn.parameter_count();
  std::size_t expect = 0;
  for (auto c : asr_cfg.conv_channels) expect += asr_overhead_closed_form(c);
  std::size_t allocated = 0;
  for (const auto* p : asr.params()) allocated += p->value.size();
  const bool pass = reported == expect && allocated == asr.parameter_count();
  return {pass, "ASR adds " + std::to_string(reported) + " parameters over BN (" + std::to_string(bn.parameter_count()) +
                    " -> " + std::to_string(asr.parameter_count()) + "), closed form " + std::to_string(expect)};
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  fs::path dir = fs::temp_directory_path() / "normshift-acceptance";
  std::set<int> only, known;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      dir = argv[++i];
    } else if ((a == "--only" || a == "--known-failures") && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) (a == "--only" ? only : known).insert(std::stoi(tok));
    } else {
      std::cerr << "usage: normshift_acceptance [--work-dir DIR] [--only 1,2,...] [--known-failures 4,6]\n";
      return 2;
    }
  }
  fs::create_directories(dir);
  fs::remove(dir / "desk-metrics.csv");
  auto wanted = [&](int k) { return only.empty() || only.count(k) > 0; };

  std::map<int, Outcome> results;
  auto record = [&](int k, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    try {
      results[k] = fn();
    } catch (const std::exception& e) {
      results[k] = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2d %s: %s\n", k, results[k].pass ? "PASS" : "FAIL", results[k].detail.c_str());
    std::fflush(stdout);
  };

  record(1, gradient_suite);
  record(2, reduction_equivalences);
  record(3, sample_independence);
  record(4, ada_mechanics);
  if (wanted(5) || wanted(6) || wanted(7)) {
    DeskResults desk;
    std::string error;
    try {
      desk = run_desk_experiment(dir);
    } catch (const std::exception& e) {
      error = e.what();
    }
    for (int k : {5, 6, 7}) {
      record(k, [&]() -> Outcome {
        if (!error.empty()) throw std::runtime_error(error);
        return k == 5 ? directional(desk) : k == 6 ? residual_growth(desk) : calibration(desk);
      });
    }
  }
  record(8, brier_units);
  record(9, [&] { return determinism(dir); });
  record(10, parameter_accounting);

  std::set<int> failed, expected;
  for (const auto& [k, r] : results) {
    if (!r.pass) failed.insert(k);
    if (known.count(k)) expected.insert(k);
  }
  auto list = [](const std::set<int>& s) {
    std::string out;
    for (int k : s) out += (out.empty() ? "" : ",") + std::to_string(k);
    return out.empty() ? std::string("none") : out;
  };
  std::printf("%zu/%zu criteria passed; failed: %s; known failures: %s\n", results.size() - failed.size(),
              results.size(), list(failed).c_str(), list(expected).c_str());
  return failed == expected ? 0 : 1;
}
