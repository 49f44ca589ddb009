#include "normshift/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "normshift/parallel.hpp"

namespace normshift {

namespace {

template <typename T>
std::size_t argmax_row(const T* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

void check_rows(const Shape& shape, std::size_t labels, const char* op) {
  if (shape.size() != 2) throw ShapeError(std::string(op) + ": expected (N,K), got " + shape_str(shape));
  if (shape[0] != labels) {
    throw ShapeError(std::string(op) + ": " + std::to_string(shape[0]) + " rows but " + std::to_string(labels) + " labels");
  }
  if (labels == 0) throw ValidationError(std::string(op) + ": empty batch");
}

void check_label(std::int32_t label, std::size_t k) {
  if (label < 0 || static_cast<std::size_t>(label) >= k) {
    throw ValidationError("label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
  }
}

// Per-sample correctness and Brier from logits, via a float64 softmax.
void score_rows(const Tensor<float>& logits, std::span<const std::int32_t> labels, std::vector<std::uint8_t>& correct,
                std::vector<double>& brier_out, std::size_t offset) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> p(k);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * k;
    check_label(labels[i], k);
    correct[offset + i] = argmax_row(row, k) == static_cast<std::size_t>(labels[i]);
    const double m = *std::max_element(row, row + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += p[j] = std::exp(static_cast<double>(row[j]) - m);
    for (auto& v : p) v /= z;
    brier_out[offset + i] = brier(p, labels[i]);
  }
}

}  // namespace

template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  check_rows(logits.shape(), labels.size(), "accuracy");
  const std::size_t k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_label(labels[i], k);
    hits += argmax_row(logits.ptr() + i * k, k) == static_cast<std::size_t>(labels[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double brier(std::span<const double> probs, std::int32_t label) {
  const std::size_t k = probs.size();
  if (k == 0) throw ValidationError("brier: empty distribution");
  check_label(label, k);
  // Squares and their rounding errors are summed with Neumaier compensation,
  // so simple distributions give correctly rounded scores.
  double sum = 0, acc = 0, comp = 0;
  auto add = [&](double v) {
    const double s = acc + v;
    comp += std::abs(acc) >= std::abs(v) ? (acc - s) + v : (v - s) + acc;
    acc = s;
  };
  for (std::size_t j = 0; j < k; ++j) {
    if (!(probs[j] >= 0)) throw ValidationError("brier: negative or non-finite probability");
    sum += probs[j];
    const double t = (static_cast<std::size_t>(label) == j ? 1.0 : 0.0) - probs[j];
    const double sq = t * t;
    add(sq);
    add(std::fma(t, t, -sq));
  }
  acc += comp;
  if (std::abs(sum - 1.0) > 1e-4) throw ValidationError("brier: probabilities sum to " + std::to_string(sum));
  return acc / static_cast<double>(k);
}

template <typename T>
double brier(const Tensor<T>& probs, std::span<const std::int32_t> labels) {
  check_rows(probs.shape(), labels.size(), "brier");
  const std::size_t k = probs.dim(1);
  std::vector<double> row(k);
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) row[j] = static_cast<double>(probs.at(i, j));
    total += brier(row, labels[i]);
  }
  return total / static_cast<double>(labels.size());
}

template double accuracy(const Tensor<float>&, std::span<const std::int32_t>);
template double accuracy(const Tensor<double>&, std::span<const std::int32_t>);
template double brier(const Tensor<float>&, std::span<const std::int32_t>);
template double brier(const Tensor<double>&, std::span<const std::int32_t>);

std::string domain_column(const DomainSpec& spec) {
  switch (spec.kind) {
    case DomainKind::Source: return "source";
    case DomainKind::Corruption: return spec.name;
    case DomainKind::Style: return "style:" + spec.name;
  }
  return "source";
}

DomainResult evaluate(Model<float>& model, const Dataset& ds, const DomainSpec& spec, std::size_t batch) {
  if (ds.size() == 0) throw ValidationError("evaluate: empty dataset");
  if (batch == 0) throw ValidationError("evaluate: batch must be positive");
  const std::size_t n = ds.size();
  const std::size_t chunks = (n + batch - 1) / batch;
  std::vector<std::uint8_t> correct(n);
  std::vector<double> briers(n);
  parallel_for(chunks, [&](std::size_t ci) {
    const std::size_t begin = ci * batch, end = std::min(n, begin + batch);
    Tape<float> tape;
    tape.set_track_params(false);
    auto out = model.forward(tape, tape.constant(ds.images.slice_rows(begin, end)), Mode::Eval);
    score_rows(out.logits.value(), std::span(ds.labels).subspan(begin, end - begin), correct, briers, begin);
  });
  DomainResult r;
  r.domain = domain_column(spec);
  r.level = spec.kind == DomainKind::Corruption ? spec.level : 0;
  r.n = n;
  std::size_t hits = 0;
  double b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += correct[i];
    b += briers[i];
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  r.brier = b / static_cast<double>(n);
  return r;
}

EvalReport make_report(std::vector<DomainResult> rows) {
  EvalReport rep;
  rep.rows = std::move(rows);
  std::map<int, std::pair<LevelAverage, std::size_t>> levels;
  LevelAverage corr{}, all{};
  std::size_t n_corr = 0;
  for (const auto& r : rep.rows) {
    all.accuracy += r.accuracy;
    all.brier += r.brier;
    if (r.level > 0) {
      auto& [avg, count] = levels[r.level];
      avg.level = r.level;
      avg.accuracy += r.accuracy;
      avg.brier += r.brier;
      ++count;
      corr.accuracy += r.accuracy;
      corr.brier += r.brier;
      ++n_corr;
    }
  }
  for (auto& [level, entry] : levels) {
    auto [avg, count] = entry;
    avg.accuracy /= static_cast<double>(count);
    avg.brier /= static_cast<double>(count);
    rep.level_averages.push_back(avg);
  }
  if (n_corr > 0) {
    corr.accuracy /= static_cast<double>(n_corr);
    corr.brier /= static_cast<double>(n_corr);
    rep.corruption_average = corr;
  }
  if (!rep.rows.empty()) {
    all.accuracy /= static_cast<double>(rep.rows.size());
    all.brier /= static_cast<double>(rep.rows.size());
    rep.overall_average = all;
  }
  return rep;
}

EvalReport evaluate_grid(Model<float>& model, std::span<const DomainSpec> specs, std::size_t n, std::size_t batch) {
  std::vector<DomainResult> rows;
  std::map<std::uint64_t, Dataset> clean;
  for (const auto& spec : specs) {
    auto it = clean.find(spec.seed);
    if (it == clean.end()) it = clean.emplace(spec.seed, gen_source(spec.seed, n, model.config().classes)).first;
    rows.push_back(evaluate(model, apply_domain(it->second, spec), spec, batch));
  }
  auto rep = make_report(std::move(rows));
  rep.model_fingerprint = model_fingerprint(model);
  return rep;
}

std::vector<DomainSpec> corruption_grid(std::uint64_t seed) {
  std::vector<DomainSpec> specs;
  specs.push_back(DomainSpec{DomainKind::Source, "", 0, seed});
  for (auto type : kCorruptionTypes)
    for (int level = 1; level <= 5; ++level) specs.push_back(DomainSpec{DomainKind::Corruption, std::string(type), level, seed});
  return specs;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string metrics_csv_rows(const std::string& run_id, std::span<const DomainResult> rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    os << run_id << ',' << r.domain << ',' << r.level << ',' << r.n << ',' << format_double(r.accuracy) << ','
       << format_double(r.brier) << '\n';
  }
  return os.str();
}

void append_metrics_csv(const std::filesystem::path& path, const std::string& run_id,
                        std::span<const DomainResult> rows) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw IoError("cannot open metrics file: " + path.string());
  if (fresh) os << kMetricsHeader << '\n';
  os << metrics_csv_rows(run_id, rows);
  if (!os) throw IoError("failed writing metrics file: " + path.string());
}

void TrajectoryLog::append(std::size_t step, std::span<const ResidualWeights> per_layer) {
  if (last_step_ && step <= *last_step_) {
    throw ValidationError("trajectory steps must increase: " + std::to_string(step) + " after " + std::to_string(*last_step_));
  }
  last_step_ = step;
  for (std::size_t l = 0; l < per_layer.size(); ++l) rows_.push_back({step, l + 1, per_layer[l]});
}

std::string TrajectoryLog::csv() const {
  std::ostringstream os;
  os << kTrajectoryHeader << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9f", v);
    return std::string(buf);
  };
  for (const auto& r : rows_) {
    os << r.step << ',' << r.layer << ',' << num(r.weights.lambda_mu) << ',' << num(r.weights.lambda_sigma) << ','
       << (r.weights.lambda_beta ? num(*r.weights.lambda_beta) : "") << ','
       << (r.weights.lambda_gamma ? num(*r.weights.lambda_gamma) : "") << '\n';
  }
  return os.str();
}

void TrajectoryLog::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open trajectory file: " + path.string());
  os << csv();
  if (!os) throw IoError("failed writing trajectory file: " + path.string());
}

template <typename T>
bool log_residual_weights(const Model<T>& model, std::size_t step, TrajectoryLog& log) {
  std::vector<ResidualWeights> weights;
  for (const auto& layer : model.norms())
    if (layer.kind() == NormKind::ASR) weights.push_back(residual_weights(std::get<ASRState<T>>(layer.state())));
  if (weights.empty()) {
    std::cerr << "warning: model has no ASR layer; residual weights not logged\n";
    return false;
  }
  log.append(step, weights);
  return true;
}

template bool log_residual_weights(const Model<float>&, std::size_t, TrajectoryLog&);
template bool log_residual_weights(const Model<double>&, std::size_t, TrajectoryLog&);

void dump_learned_stats(Model<float>& model, const Dataset& ds, const std::string& domain,
                        const std::filesystem::path& path, std::size_t layer, std::size_t batch) {
  const auto asr_layers = static_cast<std::size_t>(
      std::count_if(model.norms().begin(), model.norms().end(), [](const auto& l) { return l.kind() == NormKind::ASR; }));
  if (asr_layers == 0) throw ValidationError("dump_learned_stats requires a model with ASR layers");
  if (layer >= asr_layers) {
    throw ValidationError("ASR layer " + std::to_string(layer) + " requested, model has " + std::to_string(asr_layers));
  }
  if (batch == 0) throw ValidationError("dump_learned_stats: batch must be positive");
  const std::size_t n = ds.size();
  const std::size_t chunks = (n + batch - 1) / batch;
  std::vector<std::string> text(chunks);
  parallel_for(chunks, [&](std::size_t ci) {
    const std::size_t begin = ci * batch, end = std::min(n, begin + batch);
    Tape<float> tape;
    tape.set_track_params(false);
    std::vector<StatsProbe<float>> probes;
    model.forward(tape, tape.constant(ds.images.slice_rows(begin, end)), Mode::Eval, false, &probes);
    const auto& p = probes.at(layer);
    const std::size_t c = p.mu_stan.dim(1);
    std::ostringstream os;
    char buf[64];
    for (std::size_t i = 0; i < end - begin; ++i) {
      os << domain << ',' << ds.labels[begin + i];
      for (const auto* t : {&p.mu_stan, &p.sigma_stan}) {
        for (std::size_t j = 0; j < c; ++j) {
          std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(t->at(i, j)));
          os << buf;
        }
      }
      os << '\n';
    }
    text[ci] = os.str();
  });

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open stats dump: " + path.string());
  std::size_t channels = 0;
  for (const auto& l : model.norms()) {
    if (l.kind() != NormKind::ASR) continue;
    if (channels == layer) {
      channels = l.channels();
      break;
    }
    ++channels;
  }
  os << "domain,label";
  for (const char* stem : {"mu_stan_", "sigma_stan_"})
    for (std::size_t j = 0; j < channels; ++j) os << ',' << stem << j;
  os << '\n';
  for (const auto& t : text) os << t;
  if (!os) throw IoError("failed writing stats dump: " + path.string());
}

std::string model_fingerprint(const Model<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto* p : model.params()) {
    mix(p->name.data(), p->name.size());
    for (auto d : p->value.shape()) mix(&d, sizeof d);
    mix(p->value.ptr(), p->value.size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace normshift
