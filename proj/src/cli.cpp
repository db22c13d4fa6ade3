#include "crowdx/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "crowdx/analysis.hpp"
#include "crowdx/datagen.hpp"
#include "crowdx/error.hpp"
#include "crowdx/gradcheck.hpp"
#include "crowdx/trainer.hpp"

namespace crowdx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRunConfigVersion = 1;

json split_to_json(const SplitConfig& s) { return {{"test_fraction", s.test_fraction}, {"split_seed", s.split_seed}}; }

SplitConfig split_from_json(const json& j) {
  SplitConfig s;
  s.test_fraction = j.value("test_fraction", s.test_fraction);
  s.split_seed = j.value("split_seed", s.split_seed);
  return s;
}

std::string abs_path(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

// Output paths given relative to --out resolve against it.
fs::path under(const fs::path& out, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() || out.empty() ? q : out / q;
}

void write_run_config(const fs::path& dir, const json& rc) {
  fs::create_directories(dir);
  write_file(dir / "run_config.json", rc.dump(2) + "\n");
}

GenerationPlan builtin_or_file_plan(const std::string& name) {
  if (name == "crowdx-mini") return crowdx_mini_plan();
  if (name == "desk-default") return desk_default_plan();
  if (name == "crowdx-full") return crowdx_full_plan();
  if (!fs::exists(name)) throw ParameterError("plan", "no plan file " + name);
  return plan_from_json(json::parse(read_file(name)));
}

std::shared_ptr<const Manifest> open_dataset(const json& rc) {
  const std::string dir = rc.at("data").get<std::string>();
  if (dir.empty()) throw ParameterError("data", "a dataset directory is required");
  return std::make_shared<const Manifest>(load_manifest(dir));
}

// ---------------------------------------------------------------------------
// Subcommands. Each reads only from the run configuration.

int run_generate(const json& rc, std::ostream& out) {
  GenerationPlan plan = plan_from_json(rc.at("plan"));
  const fs::path dir = rc.at("out").get<std::string>();
  write_run_config(dir, rc);
  GenerateOptions opts;
  opts.workers = rc.value("workers", 1);
  const Manifest m = generate(plan, dir, opts);
  out << "generated " << m.samples.size() << " samples into " << dir.string() << " (mean count in frame "
      << m.stats.mean_count_in_frame << ")\n";
  return kExitOk;
}

int run_preview(const json& rc, std::ostream& out) {
  const auto manifest = open_dataset(rc);
  const std::string id = rc.at("sample").get<std::string>();
  const SampleRecord* rec = nullptr;
  for (const SampleRecord& r : manifest->samples)
    if (r.sample_id == id) rec = &r;
  if (!rec) throw ParameterError("sample", "no sample " + id + " in " + rc.at("data").get<std::string>());

  RgbImage img = read_png(manifest->path_of(rec->image_path));
  const AnnotationSet anns = annotations_from_json(json::parse(read_file(manifest->path_of(rec->annotation_path))));
  int dots = 0;
  for (const Annotation& a : anns.annotations) {
    if (!a.in_frame || !a.head_pixel) continue;
    const int cx = static_cast<int>(std::floor((*a.head_pixel).x()));
    const int cy = static_cast<int>(std::floor((*a.head_pixel).y()));
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
        std::uint8_t* p = img.at(x, y);
        p[0] = 255;
        p[1] = 0;
        p[2] = 0;
      }
    ++dots;
  }
  const fs::path png = rc.at("out").get<std::string>();
  write_run_config(png.has_parent_path() ? png.parent_path() : fs::path("."), rc);
  write_png(img, png);
  out << "wrote " << png.string() << " with " << dots << " head dots\n";
  return kExitOk;
}

int run_train(const json& rc, std::ostream& out) {
  const auto manifest = open_dataset(rc);
  const TrainConfig cfg = train_config_from_json(rc.at("train"));
  cfg.validate();
  const fs::path dir = rc.at("out").get<std::string>();
  SampleStore store(manifest);
  const SubsetView view = filter(manifest, rc.at("subset").get<std::string>());
  std::optional<SubsetView> val;
  if (!rc.value("val_subset", "").empty()) val = filter(manifest, rc.at("val_subset").get<std::string>());

  std::optional<TrainedModel> init;
  if (!rc.value("init", "").empty()) init = load_model(rc.at("init").get<std::string>());

  write_run_config(dir, rc);
  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss;
    if (std::isfinite(r.val_mae)) out << " val " << format_metric({r.val_mae, r.val_mse});
    out << "\n" << std::flush;
  };
  if (view.empty()) throw ValidationError("training subset " + view.label + " is empty");
  const auto train_set = store.load_all(view, AccessPurpose::Train, "train");
  std::vector<std::shared_ptr<const LoadedSample>> val_set;
  if (val) val_set = store.load_all(*val, AccessPurpose::Validate, "train");
  const TrainedModel model = train(train_set, val_set, cfg, init ? &init->net : nullptr, view.label, cb);
  save_model(model, dir);
  out << "saved " << (dir / "model.cxwt").string() << "\n";
  return kExitOk;
}

int run_eval(const json& rc, std::ostream& out) {
  const auto manifest = open_dataset(rc);
  TrainedModel model = load_model(rc.at("model").get<std::string>());
  SampleStore store(manifest);
  const SubsetView view = filter(manifest, rc.at("subset").get<std::string>());
  if (view.empty()) throw ValidationError("evaluation subset " + view.label + " is empty");
  std::vector<double> est, truth;
  std::string csv = "sample_id,truth,estimate,abs_error\n";
  for (std::size_t k = 0; k < view.size(); ++k) {
    const auto s = store.load(view.indices[k], AccessPurpose::Evaluate, "eval");
    est.push_back(predict_count(model.net, s->image));
    truth.push_back(s->count_in_frame);
    char line[160];
    std::snprintf(line, sizeof line, ",%d,%.6f,%.6f\n", s->count_in_frame, est.back(),
                  std::abs(est.back() - truth.back()));
    csv += s->sample_id + line;
  }
  const MetricPair m = mae_mse(est, truth);
  out << view.label << ": " << format_metric(m) << " over " << view.size() << " samples\n";
  if (!rc.value("out", "").empty()) {
    const fs::path dir = rc.at("out").get<std::string>();
    write_run_config(dir, rc);
    write_file(dir / "eval.csv", csv);
    write_file(dir / "metrics.json", json{{"mae", m.mae}, {"mse", m.mse}, {"n", view.size()}}.dump(2) + "\n");
  }
  return kExitOk;
}

int run_cmae(const json& rc, std::ostream& out) {
  const auto manifest = open_dataset(rc);
  SampleStore store(manifest);
  const TrainConfig cfg = train_config_from_json(rc.at("train"));
  CmaeOptions opts;
  opts.n_seeds = rc.value("n_seeds", 3);
  opts.split = split_from_json(rc.at("split"));
  const std::string outdir = rc.value("out", "");
  if (!outdir.empty()) {
    write_run_config(outdir, rc);
    opts.factory = network_factory(fs::path(outdir) / "cache");
  }
  const SubsetView p1 = filter(manifest, rc.at("train_subset").get<std::string>());
  const SubsetView p2 = filter(manifest, rc.at("test_subset").get<std::string>());
  const CmaeCell cell = cmae(store, p1, p2, cfg, opts);
  out << "CMAE(" << p1.label << ", " << p2.label << ") = " << format_metric(cell.metrics) << "\n";
  for (std::size_t k = 0; k < cell.seeds.size(); ++k)
    out << "  seed " << cell.seeds[k] << ": " << format_metric(cell.per_seed[k]) << "\n";
  if (!outdir.empty()) write_access_log(store.log(), *manifest, fs::path(outdir) / "access_log.csv");
  return kExitOk;
}

int run_experiment(const json& rc, std::ostream& out, std::ostream& err) {
  const auto manifest = open_dataset(rc);
  const fs::path dir = rc.at("out").get<std::string>();
  std::vector<Factor> factors;
  const std::string name = rc.at("factor").get<std::string>();
  if (name == "all")
    factors = {Factor::Background, Factor::Perspective, Factor::Density, Factor::Resolution};
  else
    factors = {factor_from_string(name)};

  ExperimentOptions opts;
  opts.n_seeds = rc.value("n_seeds", 3);
  opts.split = split_from_json(rc.at("split"));
  opts.train = train_config_from_json(rc.at("train"));
  opts.workers = rc.value("workers", 1);
  opts.cache_dir = under(dir, rc.value("cache", "cache"));
  if (!rc.value("quiet", false)) opts.log = [&err](const std::string& s) { err << s << "\n" << std::flush; };

  // Check every grid before training anything.
  for (Factor f : factors) validate_grid(factor_grid(f, *manifest), manifest, opts.split);
  write_run_config(dir, rc);

  SampleStore store(manifest);
  bool hygienic = true;
  for (Factor f : factors) {
    const ReportTable t = run_factor_grid(f, store, opts);
    write_reports(t, dir / "reports");
    out << render_report(t, "markdown") << "\n";
    const HygieneReport h = audit_split_hygiene(factor_grid(f, *manifest), manifest, opts.split, store.log());
    out << "split hygiene (" << to_string(f) << "): " << h.train_reads << " training reads, " << h.eval_reads
        << " evaluation reads, " << (h.ok() ? "no violations" : std::to_string(h.violations.size()) + " violations")
        << "\n";
    for (const std::string& v : h.violations) err << "  " << v << "\n";
    hygienic = hygienic && h.ok();
    write_access_log(store.log(), *manifest, dir / ("access_log_" + std::string(to_string(f)) + ".csv"));
    store.clear_log();
  }
  return hygienic ? kExitOk : kExitRuntime;
}

int run_gradcheck(const json& rc, std::ostream& out) {
  const double eps = rc.value("eps", 1e-5);
  const double tol = rc.value("tolerance", 1e-4);
  GradCheckCase c = make_gradcheck_case(rc.value("seed", std::uint64_t{0}), rc.value("height", 16), rc.value("width", 16));
  const GradCheckResult r = grad_check(c.net, c.input, eps);
  out << "max relative error " << r.max_rel_error << " (worst " << r.worst << ", " << r.checked
      << " entries, case seed " << c.seed << ")\n";
  return r.max_rel_error < tol ? kExitOk : kExitRuntime;
}

std::string fill_out(const CLI::App* sub, const std::string& value) { return sub->count("--out") ? abs_path(value) : ""; }

}  // namespace

int execute(const json& rc, std::ostream& out, std::ostream& err) {
  const std::string cmd = rc.at("command").get<std::string>();
  if (cmd == "generate") return run_generate(rc, out);
  if (cmd == "preview") return run_preview(rc, out);
  if (cmd == "train") return run_train(rc, out);
  if (cmd == "eval") return run_eval(rc, out);
  if (cmd == "cmae") return run_cmae(rc, out);
  if (cmd == "experiment") return run_experiment(rc, out, err);
  if (cmd == "gradcheck") return run_gradcheck(rc, out);
  throw ParameterError("command", "unknown command '" + cmd + "'");
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic crowd-counting datasets, a small attention counter and cross-dataset experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  app.add_option("--config", config_file, "JSON file merged into the run configuration (flags win)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed for generation and training");
  app.add_option("--workers", workers, "Parallel workers (generate, experiment)")->check(CLI::PositiveNumber);

  std::string plan, out_dir, data, subset, val_subset, init, model, sample, p1, p2, factor, cache, replay_file;
  std::optional<int> epochs, batch, n_seeds;
  std::optional<double> lr, test_fraction;
  std::optional<std::uint64_t> split_seed;
  bool quiet = false;

  auto add_train_flags = [&](CLI::App* s) {
    s->add_option("--epochs", epochs);
    s->add_option("--batch", batch);
    s->add_option("--lr", lr, "Initial learning rate");
  };
  auto add_split_flags = [&](CLI::App* s) {
    s->add_option("--test-fraction", test_fraction);
    s->add_option("--split-seed", split_seed);
    s->add_option("--seeds", n_seeds, "Training seeds per cell")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("generate", "Render a dataset from a plan");
  gen->add_option("--plan", plan, "Plan JSON file, or crowdx-mini / desk-default / crowdx-full")->required();
  gen->add_option("--out", out_dir)->required();

  auto* prev = app.add_subcommand("preview", "Write one sample with its head annotations drawn as dots");
  prev->add_option("--data", data)->required();
  prev->add_option("--sample", sample)->required();
  prev->add_option("--out", out_dir, "PNG path")->required();

  auto* tr = app.add_subcommand("train", "Train the counter on a subset");
  tr->add_option("--data", data)->required();
  tr->add_option("--subset", subset)->required();
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--val-subset", val_subset);
  tr->add_option("--init", init, "Pretrained model to start from");
  add_train_flags(tr);

  auto* ev = app.add_subcommand("eval", "Count a subset with a trained model and report MAE(MSE)");
  ev->add_option("--model", model)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--subset", subset)->required();
  ev->add_option("--out", out_dir);

  auto* cm = app.add_subcommand("cmae", "Train on one subset's train split, test on another's test split");
  cm->add_option("--data", data)->required();
  cm->add_option("--train-subset", p1)->required();
  cm->add_option("--test-subset", p2)->required();
  cm->add_option("--out", out_dir);
  add_train_flags(cm);
  add_split_flags(cm);

  auto* ex = app.add_subcommand("experiment", "Run a factor grid and write report tables");
  ex->add_option("--factor", factor, "background, perspective, density, resolution or all")->required();
  ex->add_option("--data", data)->required();
  ex->add_option("--out", out_dir)->required();
  ex->add_option("--cache", cache, "Model cache directory (relative to --out)");
  ex->add_flag("--quiet", quiet);
  add_train_flags(ex);
  add_split_flags(ex);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full network in f64");

  auto* rp = app.add_subcommand("replay", "Re-run a command from its run_config.json");
  rp->add_option("run_config", replay_file)->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (rp->parsed()) return execute(json::parse(read_file(replay_file)), out, err);

    CLI::App* sub = app.get_subcommands().front();
    json rc = {{"command", sub->get_name()}, {"version", kRunConfigVersion}};
    if (sub == gen) rc["plan"] = plan_to_json(builtin_or_file_plan(plan));
    if (sub == tr || sub == cm || sub == ex) rc["train"] = train_config_to_json(desk_train_config());
    if (sub == cm || sub == ex) {
      rc["split"] = split_to_json(SplitConfig{});
      rc["n_seeds"] = 3;
    }
    if (sub == gen || sub == ex) rc["workers"] = 1;

    if (!config_file.empty()) rc.merge_patch(json::parse(read_file(config_file)));
    rc["command"] = sub->get_name();

    // Flags override the file.
    if (!data.empty()) rc["data"] = abs_path(data);
    if (sub == gen || sub == tr || sub == ex) rc["out"] = abs_path(out_dir);
    if (sub == prev) rc["out"] = abs_path(out_dir);
    if (sub == ev || sub == cm) rc["out"] = fill_out(sub, out_dir);
    if (!subset.empty()) rc["subset"] = subset;
    if (sub == tr) {
      rc["val_subset"] = val_subset;
      rc["init"] = abs_path(init);
    }
    if (sub == ev) rc["model"] = abs_path(model);
    if (sub == prev) rc["sample"] = sample;
    if (sub == cm) {
      rc["train_subset"] = p1;
      rc["test_subset"] = p2;
    }
    if (sub == ex) {
      rc["factor"] = factor;
      if (!cache.empty()) rc["cache"] = cache;
      rc["quiet"] = quiet;
    }
    if (workers) rc["workers"] = *workers;
    if (n_seeds) rc["n_seeds"] = *n_seeds;
    if (test_fraction) rc["split"]["test_fraction"] = *test_fraction;
    if (split_seed) rc["split"]["split_seed"] = *split_seed;
    if (rc.contains("train")) {
      TrainConfig t = train_config_from_json(rc["train"]);
      if (epochs) t.epochs = *epochs;
      if (batch) t.batch_size = *batch;
      if (lr) t.lr_initial = *lr;
      if (seed) t.seed = *seed;
      rc["train"] = train_config_to_json(t);
    }
    if (seed && sub == gen) rc["plan"]["master_seed"] = *seed;
    if (seed && sub == gc) rc["seed"] = *seed;
    return execute(rc, out, err);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParameterError& e) {
    err << "invalid parameter: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace crowdx
