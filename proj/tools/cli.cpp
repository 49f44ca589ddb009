#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "normshift/augment.hpp"
#include "normshift/datagen.hpp"
#include "normshift/evalkit.hpp"
#include "normshift/gradsuite.hpp"
#include "normshift/model.hpp"
#include "normshift/trainer.hpp"
#include "run_config.hpp"

namespace normshift::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("config is not valid JSON: " + std::string(e.what()));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::string metrics_file(const std::vector<std::string>& runs, const std::vector<DomainResult>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) out += metrics_csv_rows(runs[i], std::span(&rows[i], 1));
  return out;
}

void print_report(std::ostream& os, const EvalReport& rep) {
  for (const auto& a : rep.level_averages) {
    os << "  level " << a.level << ": accuracy " << format_double(a.accuracy) << "  brier " << format_double(a.brier)
       << "\n";
  }
  if (rep.corruption_average) {
    os << "  corruption avg: accuracy " << format_double(rep.corruption_average->accuracy) << "  brier "
       << format_double(rep.corruption_average->brier) << "\n";
  }
  for (const auto& r : rep.rows) {
    if (r.level == 0) os << "  " << r.domain << ": accuracy " << format_double(r.accuracy) << "\n";
  }
}

int cmd_gen_data(const std::string& spec_text, const fs::path& out, std::uint64_t seed, std::size_t n,
                 std::size_t classes) {
  const auto spec = parse_domain_spec(spec_text, seed);
  const auto ds = generate_domain(spec, n, classes);
  write_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " images of " << spec.tag() << " (seed " << seed << ") to " << out.string()
            << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, bool verbose) {
  const RunConfig rc = parse_run_config(read_json_file(config_path));
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    throw ValidationError("run directory " + out_dir.string() + " already holds artifacts");
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "resolved-config.json", resolved_json(rc).dump(2) + "\n");

  const auto train_set = generate_domain(parse_domain_spec(rc.data.spec, rc.data.seed), rc.data.n, rc.data.classes);
  const auto eval_source = gen_source(rc.eval.seed, rc.eval.n, rc.data.classes);
  Model<float> model(rc.model);
  TrainOptions opts;
  opts.run_id = rc.run_id;
  opts.eval_set = &eval_source;
  opts.checkpoint_path = out_dir / "checkpoint.nsck";
  opts.verbose = verbose;

  std::cout << "training " << norm_kind_name(rc.model.norm.kind) << " model (" << model.parameter_count()
            << " parameters) for " << planned_steps(rc.train, train_set.size()) << " steps"
            << (rc.ada ? " with adversarial augmentation" : "") << "\n";
  TrainResult result = train(model, train_set, rc.train, rc.ada, opts);

  const auto specs = expand_grid(rc.eval.grid, rc.eval.seed);
  const auto report = evaluate_grid(model, specs, rc.eval.n, rc.eval.batch);
  std::vector<std::string> runs = result.metric_runs;
  std::vector<DomainResult> rows = result.metrics;
  for (const auto& r : report.rows) {
    runs.push_back(rc.run_id);
    rows.push_back(r);
  }
  write_text(out_dir / "metrics.csv", metrics_file(runs, rows));
  write_text(out_dir / "trajectory.csv", result.trajectory.csv());

  json summary{{"run_id", rc.run_id},
               {"steps", result.steps},
               {"pool_size", result.pool_size},
               {"aug_round_steps", result.aug_round_steps},
               {"parameters", model.parameter_count()},
               {"fingerprint", report.model_fingerprint}};
  if (report.corruption_average) {
    summary["corruption_accuracy"] = report.corruption_average->accuracy;
    summary["corruption_brier"] = report.corruption_average->brier;
  }
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");

  for (std::size_t r = 0; r < result.aug_round_steps.size(); ++r) {
    std::cout << "augmentation round " << r + 1 << " at step " << result.aug_round_steps[r] << "\n";
  }
  std::cout << "finished " << result.steps << " steps; evaluation:\n";
  print_report(std::cout, report);
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const std::vector<std::string>& grid, std::size_t n, std::uint64_t seed,
             std::size_t batch, const fs::path& out, const std::string& run_id) {
  auto ck = load_checkpoint(checkpoint);
  const auto specs = expand_grid(grid, seed);
  if (batch == 0) throw ValidationError("--batch must be positive");
  if (n < ck.model.config().classes) throw ValidationError("--n must be at least the class count");
  const auto report = evaluate_grid(ck.model, specs, n, batch);
  std::string text = std::string(kMetricsHeader) + "\n" + metrics_csv_rows(run_id, report.rows);
  write_text(out, text);
  std::cout << "evaluated " << report.rows.size() << " domains, wrote " << out.string() << "\n";
  print_report(std::cout, report);
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::uint64_t base, double threshold) {
  std::vector<LayerGradCheck> worst;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto res = layer_gradcheck_suite(base + s);
    if (worst.empty()) worst = res;
    for (std::size_t i = 0; i < res.size(); ++i) worst[i].max_rel_error = std::max(worst[i].max_rel_error, res[i].max_rel_error);
  }
  bool ok = true;
  for (const auto& w : worst) {
    const bool pass = w.max_rel_error < threshold;
    ok = ok && pass;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", w.max_rel_error);
    std::cout << (pass ? "ok   " : "FAIL ") << w.layer << " max_rel_error " << buf << "\n";
  }
  std::cout << (ok ? "all layers below " : "some layers above ") << threshold << " over " << seeds << " seed(s)\n";
  return ok ? 0 : 3;
}

int cmd_dump_stats(const fs::path& checkpoint, const std::string& spec_text, std::size_t n, std::uint64_t seed,
                   std::size_t layer, const fs::path& out) {
  auto ck = load_checkpoint(checkpoint);
  const auto spec = parse_domain_spec(spec_text, seed);
  const auto ds = generate_domain(spec, n, ck.model.config().classes);
  dump_learned_stats(ck.model, ds, spec.tag(), out, layer);
  std::cout << "wrote " << ds.size() << " rows to " << out.string() << "\n";
  return 0;
}

int cmd_augment(const fs::path& checkpoint, const fs::path& data, const fs::path& out, const AdaConfig& cfg,
                std::uint32_t round) {
  auto ck = load_checkpoint(checkpoint);
  const auto ds = read_dataset(data);
  auto aug = ada_maximize(ck.model, ds.images, ds.labels, cfg, round);
  Dataset result{std::move(aug.images), std::move(aug.labels), ds.manifest};
  result.manifest["augmented"] = {{"round", round}, {"ada", to_json(cfg)}, {"reverted", aug.reverted}};
  write_dataset(result, out);
  std::cout << "wrote " << result.size() << " augmented images to " << out.string() << "\n";
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"normshift: normalization under domain shift experiments"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress output on stderr");

  std::string spec = "source", grid_text;
  std::string out, config, checkpoint, data, run_id = "eval";
  std::uint64_t seed = 0;
  std::size_t n = 1000, classes = 10, batch = 256, seeds = 5, layer = 0;
  double threshold = 1e-5;
  std::vector<std::string> grid{"corruption"};
  AdaConfig ada;
  std::uint32_t round = 1;

  auto* gen = app.add_subcommand("gen-data", "Write a generated dataset file");
  gen->add_option("--spec", spec, "source | corruption:<type>:<level> | style:<name>")->required();
  gen->add_option("--out", out, "Output dataset path")->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--n", n, "Number of images");
  gen->add_option("--classes", classes, "Number of classes (2..10)");

  auto* tr = app.add_subcommand("train", "Train from a JSON run config");
  tr->add_option("--config", config, "Run config (JSON)")->required();
  tr->add_option("--out-dir", out, "Run directory (must be empty or absent)")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a domain grid");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--grid", grid, "corruption | styles | source | domain specs")->delimiter(',');
  ev->add_option("--n", n, "Images per domain");
  ev->add_option("--seed", seed, "Evaluation data seed")->default_val(1);
  ev->add_option("--batch", batch, "Evaluation batch size");
  ev->add_option("--out", out, "metrics.csv path")->default_val("metrics.csv");
  ev->add_option("--run-id", run_id, "run_id column value");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every layer in float64");
  gc->add_option("--seeds", seeds, "Number of random seeds");
  gc->add_option("--seed", seed, "First seed");
  gc->add_option("--threshold", threshold, "Maximum relative error");

  auto* ds = app.add_subcommand("dump-stats", "Export learned standardization statistics of an ASR model");
  ds->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ds->add_option("--spec", spec, "Domain spec");
  ds->add_option("--n", n, "Number of samples")->default_val(500);
  ds->add_option("--seed", seed, "Data seed")->default_val(1);
  ds->add_option("--layer", layer, "ASR layer (0-based)");
  ds->add_option("--out", out, "Output CSV")->default_val("stats_dump.csv");

  auto* au = app.add_subcommand("augment", "Run one maximization round on a dataset file");
  au->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  au->add_option("--data", data, "Input dataset file")->required();
  au->add_option("--out", out, "Output dataset file")->required();
  au->add_option("--eta", ada.eta, "Semantic penalty weight");
  au->add_option("--step-size", ada.step_size, "Ascent step size");
  au->add_option("--inner-steps", ada.inner_steps, "Ascent steps per image");
  au->add_option("--round", round, "Round index recorded in the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out, seed, n, classes);
    if (*tr) return cmd_train(config, out, verbose);
    if (*ev) return cmd_eval(checkpoint, grid, n, seed, batch, out, run_id);
    if (*gc) return cmd_gradcheck(seeds, seed, threshold);
    if (*ds) return cmd_dump_stats(checkpoint, spec, n, seed, layer, out);
    if (*au) return cmd_augment(checkpoint, data, out, ada, round);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "bad file: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {  // ValidationError, ShapeError
    std::cerr << "invalid input: " << e.what() << "\n";
    for (const auto* sub : app.get_subcommands()) std::cerr << sub->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace normshift::cli
