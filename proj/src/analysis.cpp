#include "crowdx/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "crowdx/error.hpp"
#include "crowdx/rng.hpp"

namespace crowdx {

namespace fs = std::filesystem;
using nlohmann::json;

MetricPair mae_mse(const std::vector<double>& estimates, const std::vector<double>& truths) {
  if (estimates.size() != truths.size())
    throw ParameterError("estimates", "length " + std::to_string(estimates.size()) + " differs from truths length " +
                                          std::to_string(truths.size()));
  if (estimates.empty()) throw ParameterError("estimates", "empty");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double e = std::abs(estimates[i] - truths[i]);
    abs_sum += e;
    sq_sum += e * e;
  }
  const double n = static_cast<double>(estimates.size());
  return MetricPair{abs_sum / n, std::sqrt(sq_sum / n)};
}

std::string format_metric(const MetricPair& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f(%.1f)", m.mae, m.mse);
  return buf;
}

namespace {

class NetworkModel : public CountModel {
 public:
  explicit NetworkModel(MiniESANet<float> net) : net_(std::move(net)) {}
  double predict(const LoadedSample& s) override { return predict_count(net_, s.image); }

 private:
  MiniESANet<float> net_;
};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Re-raises `e` with `where` prepended, keeping its error category.
[[noreturn]] void rethrow_with_context(std::exception_ptr e, const std::string& where) {
  try {
    std::rethrow_exception(e);
  } catch (const ParameterError& x) {
    throw ParameterError(x.field(), where + ": " + x.what());
  } catch (const ValidationError& x) {
    throw ValidationError(where + ": " + x.what());
  } catch (const TrainingError& x) {
    throw TrainingError(where + ": " + x.what());
  } catch (const FormatError& x) {
    throw FormatError(where + ": " + x.what());
  } catch (const IoError& x) {
    throw IoError(where + ": " + x.what());
  } catch (const std::exception& x) {
    throw std::runtime_error(where + ": " + x.what());
  }
}

MetricPair mean_metrics(const std::vector<MetricPair>& v) {
  MetricPair m;
  for (const MetricPair& p : v) {
    m.mae += p.mae;
    m.mse += p.mse;
  }
  m.mae /= static_cast<double>(v.size());
  m.mse /= static_cast<double>(v.size());
  return m;
}

}  // namespace

std::string model_cache_key(const TrainRequest& req) {
  std::uint64_t h = fnv1a64("crowdx-model-v1\n");
  h = fnv1a64(req.predicate + "\n", h);
  h = fnv1a64(train_config_to_json(req.config).dump() + "\n", h);
  for (const auto& s : req.samples) {
    h = fnv1a64(s->sample_id + ":" + std::to_string(s->count_in_frame) + ":", h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(s->image.pixels.data()), s->image.pixels.size()), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(s->density.values.data()),
                                 s->density.values.size() * sizeof(float)),
                h);
  }
  return hex(h);
}

ModelFactory network_factory(fs::path cache_dir) {
  return [cache_dir](const TrainRequest& req) -> std::unique_ptr<CountModel> {
    fs::path weights;
    if (!cache_dir.empty()) {
      weights = cache_dir / (model_cache_key(req) + ".cxwt");
      if (fs::exists(weights)) {
        MiniESANet<float> net(req.config.net);
        load_weights(net, weights);
        return std::make_unique<NetworkModel>(std::move(net));
      }
    }
    TrainedModel m = train(req.samples, {}, req.config, nullptr, req.predicate);
    if (!weights.empty()) {
      write_file(weights.parent_path() / (weights.stem().string() + ".history.csv"), m.history_csv());
      write_file(weights.parent_path() / (weights.stem().string() + ".json"), m.provenance().dump(2) + "\n");
      save_weights(m.net, weights);  // last, so its presence marks a complete entry
    }
    return std::make_unique<NetworkModel>(std::move(m.net));
  };
}

std::vector<std::uint64_t> cell_seeds(const TrainConfig& cfg, int n_seeds) {
  if (n_seeds < 1) throw ParameterError("n_seeds", "must be >= 1");
  std::vector<std::uint64_t> s;
  for (int k = 0; k < n_seeds; ++k) s.push_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(k)));
  return s;
}

std::string train_context(const std::string& psi1) { return "train:" + psi1; }
std::string eval_context(const std::string& psi1, const std::string& psi2) { return "eval:" + psi1 + "->" + psi2; }

namespace {

// Trains one model per (row, seed), optionally on several threads. Job order
// and seeds are fixed, so the result does not depend on the worker count.
std::vector<std::vector<std::unique_ptr<CountModel>>> train_rows(
    SampleStore& store, const std::vector<SubsetView>& rows, const TrainConfig& cfg,
    const std::vector<std::uint64_t>& seeds, const ModelFactory& factory, int workers,
    const std::function<void(const std::string&)>& log) {
  const std::size_t jobs = rows.size() * seeds.size();
  std::vector<std::vector<std::unique_ptr<CountModel>>> models(rows.size());
  for (auto& m : models) m.resize(seeds.size());
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto work = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      const std::size_t r = j / seeds.size(), k = j % seeds.size();
      try {
        TrainRequest req{store.load_all(rows[r], AccessPurpose::Train, train_context(rows[r].label)), rows[r].label,
                         cfg};
        req.config.seed = seeds[k];
        if (log) {
          std::lock_guard lock(log_mu);
          log("training " + rows[r].label + " (" + std::to_string(req.samples.size()) + " samples, seed " +
              std::to_string(seeds[k]) + ")");
        }
        models[r][k] = factory(req);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs)));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(work);
  }
  for (std::size_t j = 0; j < jobs; ++j)
    if (errors[j])
      rethrow_with_context(errors[j], "CMAE row " + rows[j / seeds.size()].label + ", seed " +
                                          std::to_string(seeds[j % seeds.size()]));
  return models;
}

CmaeCell evaluate_cell(SampleStore& store, std::vector<std::unique_ptr<CountModel>>& models,
                       std::vector<std::unordered_map<std::size_t, double>>& memo, const std::string& psi1,
                       const SubsetView& test, const std::vector<std::uint64_t>& seeds) {
  CmaeCell cell;
  cell.train_predicate = psi1;
  cell.test_predicate = test.label;
  cell.seeds = seeds;
  const auto samples = store.load_all(test, AccessPurpose::Evaluate, eval_context(psi1, test.label));
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    std::vector<double> est, truth;
    for (const auto& s : samples) {
      auto it = memo[k].find(s->index);
      const double e = it != memo[k].end() ? it->second : (memo[k][s->index] = models[k]->predict(*s));
      est.push_back(e);
      truth.push_back(s->count_in_frame);
      cell.samples.push_back(SampleError{s->sample_id, seeds[k], static_cast<double>(s->count_in_frame), e});
    }
    cell.per_seed.push_back(mae_mse(est, truth));
  }
  cell.metrics = mean_metrics(cell.per_seed);
  return cell;
}

}  // namespace

CmaeCell cmae(SampleStore& store, const SubsetView& psi1, const SubsetView& psi2, const TrainConfig& cfg,
              const CmaeOptions& opts) {
  const auto [train1, test1] = train_test_split(psi1, opts.split);
  const auto [train2, test2] = train_test_split(psi2, opts.split);
  if (train1.empty()) throw ValidationError("CMAE(" + psi1.label + ", " + psi2.label + "): empty training split");
  if (test2.empty()) throw ValidationError("CMAE(" + psi1.label + ", " + psi2.label + "): empty test split");
  const auto seeds = cell_seeds(cfg, opts.n_seeds);
  const ModelFactory factory = opts.factory ? opts.factory : network_factory();
  auto models = train_rows(store, {train1}, cfg, seeds, factory, 1, {});
  std::vector<std::unordered_map<std::size_t, double>> memo(seeds.size());
  try {
    return evaluate_cell(store, models[0], memo, psi1.label, test2, seeds);
  } catch (...) {
    rethrow_with_context(std::current_exception(), "CMAE(" + psi1.label + ", " + psi2.label + ")");
  }
}

const char* to_string(Factor f) {
  switch (f) {
    case Factor::Background: return "background";
    case Factor::Perspective: return "perspective";
    case Factor::Density: return "density";
    default: return "resolution";
  }
}

Factor factor_from_string(const std::string& s) {
  for (Factor f : {Factor::Background, Factor::Perspective, Factor::Density, Factor::Resolution})
    if (s == to_string(f)) return f;
  throw ParameterError("factor", "unknown factor '" + s + "' (expected background, perspective, density or resolution)");
}

GridSpec factor_grid(Factor f, const Manifest& manifest) {
  if (manifest.samples.empty()) throw ValidationError("manifest has no samples");
  Resolution work = manifest.samples.front().resolution;
  for (const SampleRecord& r : manifest.samples)
    if (static_cast<long>(r.resolution.width) * r.resolution.height < static_cast<long>(work.width) * work.height)
      work = r.resolution;
  const std::string res = "&RES(" + work.label() + ")";

  GridSpec g;
  g.factor = f;
  auto axis = [&](const std::string& label, const std::string& expr) {
    g.axes.push_back(GridAxis{label, parse_predicate(expr)});
  };
  switch (f) {
    case Factor::Background:
      g.title = "Background factor";
      g.scope = work.label() + " renders, all pitches";
      axis("BG(solid)", "BG(solid)" + res);
      axis("BG(city)", "BG(city)" + res);
      break;
    case Factor::Perspective:
      g.title = "Camera pitch factor";
      g.scope = work.label() + " renders, all backgrounds";
      for (const char* p : {"CP(30)", "CP(50)", "CP(70)", "CP(90)", "CP(30,50)"}) axis(p, std::string(p) + res);
      break;
    case Factor::Density:
      g.title = "Crowd density factor";
      g.scope = work.label() + " renders at pitches 30 and 50; PN(all) is CP(30,50)";
      for (const char* p : {"PN(0-200)", "PN(200-400)", "PN(400+)", "PN(all)"})
        axis(p, "CP(30,50)&" + std::string(p) + res);
      break;
    case Factor::Resolution:
      g.title = "Resolution factor";
      g.scope = "solid backgrounds at pitch 30; test images are fed at native resolution";
      axis("Low(" + kLowResolution.label() + ")", "BG(solid)&CP(30)&RES(" + kLowResolution.label() + ")");
      axis("High(" + kHighResolution.label() + ")", "BG(solid)&CP(30)&RES(" + kHighResolution.label() + ")");
      break;
  }
  return g;
}

void validate_grid(const GridSpec& spec, const std::shared_ptr<const Manifest>& manifest, const SplitConfig& split) {
  std::vector<std::string> missing;
  for (const GridAxis& a : spec.axes) {
    const SubsetView v = filter(manifest, a.predicate, a.label);
    std::size_t n_train = 0, n_test = 0;
    if (v.size() >= 2) {
      const auto [tr, te] = train_test_split(v, split);
      n_train = tr.size();
      n_test = te.size();
    }
    if (n_train == 0 || n_test == 0)
      missing.push_back(a.label + " (" + std::to_string(v.size()) + " samples, " + std::to_string(n_train) +
                        " train / " + std::to_string(n_test) + " test)");
  }
  if (!missing.empty()) {
    std::string msg = std::string(to_string(spec.factor)) + " grid: dataset does not cover ";
    for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : "") + missing[i];
    throw ValidationError(msg);
  }
}

ReportTable run_factor_grid(Factor f, SampleStore& store, const ExperimentOptions& opts) {
  const auto manifest = store.manifest_ptr();
  const GridSpec spec = factor_grid(f, *manifest);
  validate_grid(spec, manifest, opts.split);
  opts.train.validate();

  std::vector<SubsetView> trains, tests;
  for (const GridAxis& a : spec.axes) {
    auto [tr, te] = train_test_split(filter(manifest, a.predicate, a.label), opts.split);
    trains.push_back(std::move(tr));
    tests.push_back(std::move(te));
  }
  const auto seeds = cell_seeds(opts.train, opts.n_seeds);
  const ModelFactory factory = opts.factory ? opts.factory : network_factory(opts.cache_dir);
  if (!opts.cache_dir.empty()) fs::create_directories(opts.cache_dir);

  auto models = train_rows(store, trains, opts.train, seeds, factory, opts.workers, opts.log);

  ReportTable t;
  t.factor = to_string(f);
  t.title = spec.title;
  t.scope = spec.scope;
  t.n_seeds = opts.n_seeds;
  for (const GridAxis& a : spec.axes) {
    t.row_labels.push_back(a.label);
    t.col_labels.push_back(a.label);
    t.row_predicates.push_back(a.predicate.to_json());
    t.col_predicates.push_back(a.predicate.to_json());
  }
  t.cells.resize(spec.axes.size());
  for (std::size_t r = 0; r < spec.axes.size(); ++r) {
    std::vector<std::unordered_map<std::size_t, double>> memo(seeds.size());
    for (std::size_t c = 0; c < spec.axes.size(); ++c) {
      if (opts.log) opts.log("evaluating " + spec.axes[r].label + " -> " + spec.axes[c].label);
      try {
        t.cells[r].push_back(evaluate_cell(store, models[r], memo, spec.axes[r].label, tests[c], seeds));
      } catch (...) {
        rethrow_with_context(std::current_exception(),
                             "CMAE(" + spec.axes[r].label + ", " + spec.axes[c].label + ")");
      }
    }
  }
  if (f == Factor::Density) t.notes = density_observations(t);
  return t;
}

std::vector<std::string> density_observations(const ReportTable& t) {
  std::vector<std::string> notes;
  const auto col = std::find(t.col_labels.begin(), t.col_labels.end(), "PN(0-200)");
  if (col == t.col_labels.end()) return notes;
  const std::size_t target = static_cast<std::size_t>(col - t.col_labels.begin());
  int holds = 0;
  for (std::size_t r = 0; r < t.cells.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < t.cells[r].size(); ++c)
      if (t.cells[r][c].metrics.mae < t.cells[r][best].metrics.mae) best = c;
    const bool yes = best == target;
    holds += yes;
    notes.push_back("Row " + t.row_labels[r] + ": lowest MAE in column " + t.col_labels[best] +
                    (yes ? " (PN(0-200) is the best cell)" : " (PN(0-200) is not the best cell)"));
  }
  notes.push_back("PN(0-200) is the best column in " + std::to_string(holds) + " of " +
                  std::to_string(t.cells.size()) + " rows.");
  return notes;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) {
    if (c == '"') o += '"';
    o += c;
  }
  return o + "\"";
}

std::string file_label(std::size_t r, std::size_t c) { return "r" + std::to_string(r) + "_c" + std::to_string(c); }

}  // namespace

std::string render_report(const ReportTable& t, const std::string& format) {
  std::ostringstream os;
  char buf[128];
  if (format == "markdown") {
    os << "# " << t.title << "\n\n";
    os << "Row i, column j: CMAE(row i, column j), i.e. a model trained on the training split of row i and "
          "evaluated on the test split of column j. Cells read MAE(MSE) of the predicted count, averaged over "
       << t.n_seeds << (t.n_seeds == 1 ? " seed" : " seeds") << ". Scope: " << t.scope << ".\n\n";
    os << "| train \\ test |";
    for (const auto& c : t.col_labels) os << " " << c << " |";
    os << "\n|---|";
    for (std::size_t c = 0; c < t.col_labels.size(); ++c) os << "---|";
    os << "\n";
    for (std::size_t r = 0; r < t.cells.size(); ++r) {
      os << "| " << t.row_labels[r] << " |";
      for (std::size_t c = 0; c < t.cells[r].size(); ++c) {
        const std::string v = format_metric(t.cells[r][c].metrics);
        os << " " << (r == c ? "**" + v + "**" : v) << " |";
      }
      os << "\n";
    }
    if (!t.notes.empty()) {
      os << "\n## Observations\n\n";
      for (const auto& n : t.notes) os << "- " << n << "\n";
    }
  } else if (format == "csv") {
    os << "row,col,mae,mse,seeds\n";
    for (std::size_t r = 0; r < t.cells.size(); ++r)
      for (std::size_t c = 0; c < t.cells[r].size(); ++c) {
        const CmaeCell& cell = t.cells[r][c];
        std::string seeds;
        for (std::size_t k = 0; k < cell.seeds.size(); ++k) seeds += (k ? ";" : "") + std::to_string(cell.seeds[k]);
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,", cell.metrics.mae, cell.metrics.mse);
        os << csv_field(t.row_labels[r]) << "," << csv_field(t.col_labels[c]) << "," << buf << seeds << "\n";
      }
  } else {
    throw ParameterError("format", "expected markdown or csv, got " + format);
  }
  return os.str();
}

void write_reports(const ReportTable& t, const fs::path& dir) {
  write_file(dir / (t.factor + ".md"), render_report(t, "markdown"));
  write_file(dir / (t.factor + ".csv"), render_report(t, "csv"));
  char buf[128];
  for (std::size_t r = 0; r < t.cells.size(); ++r)
    for (std::size_t c = 0; c < t.cells[r].size(); ++c) {
      const CmaeCell& cell = t.cells[r][c];
      std::ostringstream os;
      os << "# train=" << cell.train_predicate << " test=" << cell.test_predicate << "\n";
      os << "sample_id,seed,truth,estimate,abs_error\n";
      for (const SampleError& e : cell.samples) {
        std::snprintf(buf, sizeof buf, ",%.1f,%.6f,%.6f\n", e.truth, e.estimate, std::abs(e.estimate - e.truth));
        os << e.sample_id << "," << e.seed << buf;
      }
      write_file(dir / t.factor / (file_label(r, c) + ".csv"), os.str());
    }
}

void write_access_log(const std::vector<AccessEvent>& log, const Manifest& manifest, const fs::path& path) {
  std::ostringstream os;
  os << "purpose,index,sample_id,context\n";
  for (const AccessEvent& e : log)
    os << to_string(e.purpose) << "," << e.index << "," << manifest.samples.at(e.index).sample_id << ","
       << csv_field(e.context) << "\n";
  write_file(path, os.str());
}

std::vector<AccessEvent> read_access_log(const fs::path& path) {
  std::istringstream is(read_file(path));
  std::string line;
  std::getline(is, line);  // header
  std::vector<AccessEvent> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1), p3 = line.find(',', p2 + 1);
    if (p3 == std::string::npos) throw FormatError("malformed access log line: " + line);
    AccessEvent e;
    const std::string purpose = line.substr(0, p1);
    e.purpose = purpose == "train" ? AccessPurpose::Train
                : purpose == "validate" ? AccessPurpose::Validate
                                        : AccessPurpose::Evaluate;
    e.index = std::stoull(line.substr(p1 + 1, p2 - p1 - 1));
    std::string ctx = line.substr(p3 + 1);
    if (ctx.size() >= 2 && ctx.front() == '"') {
      std::string un;
      for (std::size_t i = 1; i + 1 < ctx.size(); ++i) {
        un += ctx[i];
        if (ctx[i] == '"') ++i;
      }
      ctx = un;
    }
    e.context = ctx;
    out.push_back(std::move(e));
  }
  return out;
}

HygieneReport audit_split_hygiene(const GridSpec& spec, const std::shared_ptr<const Manifest>& manifest,
                                  const SplitConfig& split, const std::vector<AccessEvent>& log) {
  std::map<std::string, std::set<std::size_t>> train_of, test_of;
  std::set<std::size_t> any_test;
  for (const GridAxis& a : spec.axes) {
    const auto [tr, te] = train_test_split(filter(manifest, a.predicate, a.label), split);
    train_of[a.label].insert(tr.indices.begin(), tr.indices.end());
    test_of[a.label].insert(te.indices.begin(), te.indices.end());
    any_test.insert(te.indices.begin(), te.indices.end());
  }
  HygieneReport rep;
  auto id = [&](std::size_t i) { return manifest->samples.at(i).sample_id; };
  for (const AccessEvent& e : log) {
    if (e.context.rfind("train:", 0) == 0) {
      ++rep.train_reads;
      const std::string row = e.context.substr(6);
      if (!train_of.count(row)) {
        rep.violations.push_back("training read under unknown row '" + row + "'");
      } else if (!train_of[row].count(e.index)) {
        rep.violations.push_back("training for " + row + " read " + id(e.index) + ", outside its training split");
      } else if (any_test.count(e.index)) {
        rep.violations.push_back("training for " + row + " read test sample " + id(e.index));
      }
    } else if (e.context.rfind("eval:", 0) == 0) {
      ++rep.eval_reads;
      const std::string cell = e.context.substr(5);
      const auto arrow = cell.find("->");
      const std::string col = arrow == std::string::npos ? "" : cell.substr(arrow + 2);
      if (!test_of.count(col)) {
        rep.violations.push_back("evaluation read under unknown cell '" + cell + "'");
      } else if (!test_of[col].count(e.index)) {
        rep.violations.push_back("cell " + cell + " evaluated on " + id(e.index) + ", outside the test split of " + col);
      }
      if (e.purpose != AccessPurpose::Evaluate)
        rep.violations.push_back("cell " + cell + " logged a non-evaluation read");
    } else {
      rep.violations.push_back("read of " + id(e.index) + " with unrecognized context '" + e.context + "'");
    }
  }
  return rep;
}

}  // namespace crowdx
