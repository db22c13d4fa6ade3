#include "crowdx/datagen.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

#include "crowdx/error.hpp"

namespace crowdx {

using nlohmann::json;
namespace fs = std::filesystem;

int CountSpec::draw(Rng& rng) const {
  if (mode == Mode::List) {
    if (values.empty()) throw ParameterError("counts", "explicit count list is empty");
    return values[rng.below(values.size())];
  }
  return sample_count(rng, ladder);
}

void GenerationPlan::validate() const {
  if (backgrounds.empty()) throw ParameterError("backgrounds", "axis is empty");
  if (pitches.empty()) throw ParameterError("pitches", "axis is empty");
  if (resolutions.empty()) throw ParameterError("resolutions", "axis is empty");
  if (repeats < 1) throw ParameterError("repeats", "must be >= 1");
  for (double p : pitches)
    if (!(p >= 10.0 && p <= 90.0)) throw ParameterError("pitches", "pitch outside [10, 90]");
  for (const Resolution& r : resolutions) {
    if (r.width < 32 || r.height < 32 || r.width % 4 || r.height % 4)
      throw ParameterError("resolutions", "each side must be >= 32 and divisible by 4");
  }
  for (const BackgroundDescriptor& b : backgrounds) {
    if (b.kind == BackgroundKind::SolidColor && b.palette_or_seed >= kPaletteSize)
      throw ParameterError("backgrounds", "palette index must be < 5");
  }
  if (counts.mode == CountSpec::Mode::List) {
    if (counts.values.empty()) throw ParameterError("counts", "axis is empty");
    for (int c : counts.values)
      if (c < 1) throw ParameterError("counts", "counts must be positive");
  } else if (counts.ladder.start < 1 || counts.ladder.step < 1 || counts.ladder.stop < counts.ladder.start) {
    throw ParameterError("counts", "ladder needs 0 < start <= stop and step > 0");
  }
}

// ---------------------------------------------------------------------------
// Plan JSON

namespace {

json descriptor_to_json(const BackgroundDescriptor& b) {
  if (b.kind == BackgroundKind::SolidColor)
    return json{{"kind", to_string(b.kind)}, {"palette_index", b.palette_or_seed}};
  return json{{"kind", to_string(b.kind)}, {"city_seed", b.palette_or_seed}};
}

BackgroundDescriptor descriptor_from_json(const json& j) {
  BackgroundDescriptor b;
  b.kind = background_kind_from_string(j.at("kind").get<std::string>());
  b.palette_or_seed = b.kind == BackgroundKind::SolidColor ? j.at("palette_index").get<std::uint64_t>()
                                                           : j.at("city_seed").get<std::uint64_t>();
  return b;
}

json sigma_to_json(const SigmaPolicy& s) {
  if (s.mode == SigmaPolicy::Mode::Fixed) return json{{"mode", "fixed"}, {"sigma_px", s.fixed_px}};
  return json{{"mode", "adaptive"}, {"head_fraction", s.head_fraction}, {"floor_px", s.floor_px}};
}

SigmaPolicy sigma_from_json(const json& j) {
  SigmaPolicy s;
  const std::string mode = j.value("mode", "adaptive");
  if (mode == "fixed") {
    s.mode = SigmaPolicy::Mode::Fixed;
    s.fixed_px = j.value("sigma_px", s.fixed_px);
  } else if (mode == "adaptive") {
    s.head_fraction = j.value("head_fraction", s.head_fraction);
    s.floor_px = j.value("floor_px", s.floor_px);
  } else {
    throw ParameterError("density.sigma.mode", "expected 'adaptive' or 'fixed'");
  }
  return s;
}

json record_to_json(const SampleRecord& r) {
  json j = {{"sample_id", r.sample_id},
            {"seed", r.seed},
            {"attempts", r.attempts},
            {"background", descriptor_to_json(r.background)},
            {"pitch_deg", r.pitch_deg},
            {"resolution", {r.resolution.width, r.resolution.height}},
            {"requested_count", r.requested_count},
            {"count_in_frame", r.count_in_frame},
            {"image", r.image_path},
            {"annotation", r.annotation_path},
            {"density", r.density_path}};
  return j;
}

SampleRecord record_from_json(const json& j) {
  SampleRecord r;
  r.sample_id = j.at("sample_id").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.attempts = j.value("attempts", 1);
  r.background = descriptor_from_json(j.at("background"));
  r.pitch_deg = j.at("pitch_deg").get<double>();
  r.resolution = Resolution{j.at("resolution").at(0).get<int>(), j.at("resolution").at(1).get<int>()};
  r.requested_count = j.at("requested_count").get<int>();
  r.count_in_frame = j.at("count_in_frame").get<int>();
  r.image_path = j.at("image").get<std::string>();
  r.annotation_path = j.at("annotation").get<std::string>();
  r.density_path = j.at("density").get<std::string>();
  return r;
}

json spec_to_json(const SampleSpec& s) {
  return json{{"index", s.index},
              {"seed", s.seed},
              {"background", descriptor_to_json(s.background)},
              {"pitch_deg", s.pitch_deg},
              {"resolution", {s.resolution.width, s.resolution.height}},
              {"requested_count", s.requested_count}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

json plan_to_json(const GenerationPlan& plan) {
  json bgs = json::array();
  for (const auto& b : plan.backgrounds) bgs.push_back(descriptor_to_json(b));
  json res = json::array();
  for (const auto& r : plan.resolutions) res.push_back({r.width, r.height});
  json counts;
  if (plan.counts.mode == CountSpec::Mode::List) {
    counts = plan.counts.values;
  } else {
    counts = json{{"ladder",
                   {{"start", plan.counts.ladder.start},
                    {"stop", plan.counts.ladder.stop},
                    {"step", plan.counts.ladder.step}}}};
  }
  return json{{"name", plan.name},
              {"master_seed", plan.master_seed},
              {"backgrounds", bgs},
              {"pitches", plan.pitches},
              {"resolutions", res},
              {"counts", counts},
              {"repeats", plan.repeats},
              {"camera", {{"distance_m", plan.distance_m}, {"fov_v_deg", plan.fov_v_deg}}},
              {"scene",
               {{"heading_sigma_deg", plan.scene.heading_sigma_deg},
                {"min_separation_m", plan.scene.min_separation_m},
                {"attempts_per_pedestrian", plan.scene.attempts_per_pedestrian},
                {"height_mean_m", plan.scene.height_mean_m},
                {"height_sigma_m", plan.scene.height_sigma_m}}},
              {"city",
               {{"extent_m", plan.city.extent_m},
                {"block_pitch_m", plan.city.block_pitch_m},
                {"street_width_m", plan.city.street_width_m},
                {"min_height_m", plan.city.min_height_m},
                {"max_height_m", plan.city.max_height_m},
                {"occupancy", plan.city.occupancy}}},
              {"density", {{"downsample", plan.density_downsample}, {"sigma", sigma_to_json(plan.sigma)}}}};
}

GenerationPlan plan_from_json(const json& j) {
  GenerationPlan plan;
  try {
    plan.name = j.value("name", plan.name);
    plan.master_seed = j.value("master_seed", plan.master_seed);
    for (const json& b : j.at("backgrounds")) plan.backgrounds.push_back(descriptor_from_json(b));
    plan.pitches = j.at("pitches").get<std::vector<double>>();
    for (const json& r : j.at("resolutions")) plan.resolutions.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
    const json& c = j.value("counts", json("ladder"));
    if (c.is_string()) {
      if (c.get<std::string>() != "ladder") throw ParameterError("counts", "expected \"ladder\" or a list");
    } else if (c.is_array()) {
      plan.counts.mode = CountSpec::Mode::List;
      plan.counts.values = c.get<std::vector<int>>();
    } else {
      const json& l = c.at("ladder");
      plan.counts.ladder = CountLadder{l.value("start", 100), l.value("stop", 1000), l.value("step", 100)};
    }
    plan.repeats = j.value("repeats", 1);
    if (j.contains("camera")) {
      plan.distance_m = j["camera"].value("distance_m", plan.distance_m);
      plan.fov_v_deg = j["camera"].value("fov_v_deg", plan.fov_v_deg);
    }
    if (j.contains("scene")) {
      const json& s = j["scene"];
      plan.scene.heading_sigma_deg = s.value("heading_sigma_deg", plan.scene.heading_sigma_deg);
      plan.scene.min_separation_m = s.value("min_separation_m", plan.scene.min_separation_m);
      plan.scene.attempts_per_pedestrian = s.value("attempts_per_pedestrian", plan.scene.attempts_per_pedestrian);
      plan.scene.height_mean_m = s.value("height_mean_m", plan.scene.height_mean_m);
      plan.scene.height_sigma_m = s.value("height_sigma_m", plan.scene.height_sigma_m);
    }
    if (j.contains("city")) {
      const json& c2 = j["city"];
      plan.city.extent_m = c2.value("extent_m", plan.city.extent_m);
      plan.city.block_pitch_m = c2.value("block_pitch_m", plan.city.block_pitch_m);
      plan.city.street_width_m = c2.value("street_width_m", plan.city.street_width_m);
      plan.city.min_height_m = c2.value("min_height_m", plan.city.min_height_m);
      plan.city.max_height_m = c2.value("max_height_m", plan.city.max_height_m);
      plan.city.occupancy = c2.value("occupancy", plan.city.occupancy);
    }
    if (j.contains("density")) {
      plan.density_downsample = j["density"].value("downsample", plan.density_downsample);
      if (j["density"].contains("sigma")) plan.sigma = sigma_from_json(j["density"]["sigma"]);
    }
  } catch (const json::exception& e) {
    throw ParameterError("plan", e.what());
  }
  plan.validate();
  return plan;
}

std::vector<BackgroundDescriptor> all_backgrounds() {
  std::vector<BackgroundDescriptor> out;
  for (int i = 0; i < kPaletteSize; ++i)
    out.push_back({BackgroundKind::SolidColor, static_cast<std::uint64_t>(i)});
  for (std::uint64_t s : {1ULL, 2ULL, 3ULL}) out.push_back({BackgroundKind::ProceduralCity, s});
  return out;
}

GenerationPlan crowdx_mini_plan() {
  GenerationPlan plan;
  plan.name = "crowdx-mini";
  plan.master_seed = 2021;
  plan.backgrounds = all_backgrounds();
  plan.pitches = {30, 50, 70, 90};
  plan.resolutions = {kHighResolution, kLowResolution};
  plan.repeats = 8;
  return plan;
}

GenerationPlan desk_default_plan() {
  GenerationPlan plan;
  plan.name = "desk-default";
  plan.master_seed = 7;
  plan.backgrounds = {{BackgroundKind::SolidColor, 0}, {BackgroundKind::ProceduralCity, 1}};
  plan.pitches = {30, 50, 70, 90};
  plan.resolutions = {kLowResolution};
  plan.repeats = 25;
  return plan;
}

GenerationPlan crowdx_full_plan() {
  GenerationPlan plan;
  plan.name = "crowdx-full";
  plan.master_seed = 2021;
  plan.backgrounds = all_backgrounds();
  plan.pitches = {30, 50, 70, 90};
  plan.resolutions = {kHighResolution};
  plan.repeats = 750;
  return plan;
}

std::string format_sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

std::string SampleSpec::sample_id() const { return format_sample_id(index); }

std::vector<SampleSpec> expand_plan(const GenerationPlan& plan) {
  plan.validate();
  std::vector<SampleSpec> specs;
  specs.reserve(plan.backgrounds.size() * plan.pitches.size() * plan.resolutions.size() *
                static_cast<std::size_t>(plan.repeats));
  for (const auto& bg : plan.backgrounds) {
    for (double pitch : plan.pitches) {
      for (const auto& res : plan.resolutions) {
        for (int r = 0; r < plan.repeats; ++r) {
          SampleSpec s;
          s.index = specs.size();
          s.seed = derive_seed(plan.master_seed, s.index);
          s.background = bg;
          s.pitch_deg = pitch;
          s.resolution = res;
          Rng rng(s.seed);
          s.requested_count = plan.counts.draw(rng);
          specs.push_back(s);
        }
      }
    }
  }
  return specs;
}

GeneratedSample generate_sample(const GenerationPlan& plan, const SampleSpec& spec) {
  const CameraConfig cam = camera_from_pitch(spec.pitch_deg, plan.distance_m, plan.fov_v_deg,
                                             spec.resolution.width, spec.resolution.height);
  const BackgroundSpec bg = make_background(spec.background.kind, spec.background.palette_or_seed, plan.city);

  constexpr int kMaxRetries = 3;
  GeneratedSample out;
  for (int attempt = 0;; ++attempt) {
    try {
      out.scene = sample_scene(bg, cam, spec.requested_count, derive_seed(spec.seed, attempt + 1), plan.scene);
      out.attempts = attempt + 1;
      break;
    } catch (const RegionTooDense&) {
      if (attempt == kMaxRetries) throw;
    }
  }
  out.scene.scene_id = spec.sample_id();
  out.image = to_image(rasterize(out.scene));
  out.visibility = head_visibility(out.scene);
  out.annotations = annotate(out.scene, out.visibility);
  out.density = density_from_annotations(out.annotations, plan.density_downsample, plan.sigma);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

json manifest_to_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& r : m.samples) samples.push_back(record_to_json(r));
  return json{{"format_version", m.format_version},
              {"plan", plan_to_json(m.plan)},
              {"samples", samples},
              {"statistics",
               {{"sample_count", m.stats.sample_count},
                {"mean_requested_count", m.stats.mean_requested_count},
                {"mean_count_in_frame", m.stats.mean_count_in_frame}}}};
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
      throw FormatError("manifest: unsupported format_version " + std::to_string(m.format_version));
    m.plan = plan_from_json(j.at("plan"));
    for (const json& r : j.at("samples")) m.samples.push_back(record_from_json(r));
    const json& st = j.at("statistics");
    m.stats.sample_count = st.at("sample_count").get<std::size_t>();
    m.stats.mean_requested_count = st.at("mean_requested_count").get<double>();
    m.stats.mean_count_in_frame = st.at("mean_count_in_frame").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

Manifest load_manifest(const fs::path& dataset_dir) {
  const fs::path p = dataset_dir / "manifest.json";
  if (!fs::exists(p)) throw ValidationError("no manifest.json in " + dataset_dir.string());
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
  Manifest m = manifest_from_json(j);
  m.root = dataset_dir;
  return m;
}

void save_manifest(const Manifest& m, const fs::path& dataset_dir) {
  write_file(dataset_dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

namespace {

std::optional<SampleRecord> resume_record(const fs::path& out, const SampleSpec& spec) {
  const fs::path journal = out / ".journal" / (spec.sample_id() + ".json");
  if (!fs::exists(journal)) return std::nullopt;
  try {
    const json j = json::parse(read_file(journal));
    if (j.at("spec") != spec_to_json(spec)) return std::nullopt;
    SampleRecord rec = record_from_json(j.at("record"));
    const json& hashes = j.at("hashes");
    for (const auto& [key, rel] : {std::pair{"image", rec.image_path}, std::pair{"annotation", rec.annotation_path},
                                   std::pair{"density", rec.density_path}}) {
      const fs::path p = out / rel;
      if (!fs::exists(p) || hashes.at(key).get<std::string>() != hex64(fnv1a64(read_file(p)))) return std::nullopt;
    }
    return rec;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

SampleRecord write_sample(const GenerationPlan& plan, const SampleSpec& spec, const fs::path& out) {
  const GeneratedSample g = generate_sample(plan, spec);
  SampleRecord rec;
  rec.sample_id = spec.sample_id();
  rec.seed = spec.seed;
  rec.attempts = g.attempts;
  rec.background = spec.background;
  rec.pitch_deg = spec.pitch_deg;
  rec.resolution = spec.resolution;
  rec.requested_count = spec.requested_count;
  rec.count_in_frame = g.annotations.count_in_frame;
  rec.image_path = "images/" + rec.sample_id + ".png";
  rec.annotation_path = "ann/" + rec.sample_id + ".json";
  rec.density_path = "density/" + rec.sample_id + ".cxdm";

  const std::string png = encode_png(g.image);
  const std::string ann = annotations_to_json(g.annotations).dump(1) + "\n";
  const std::string dens = encode_density(g.density);
  write_file(out / rec.image_path, png);
  write_file(out / rec.annotation_path, ann);
  write_file(out / rec.density_path, dens);

  const json journal{{"spec", spec_to_json(spec)},
                     {"record", record_to_json(rec)},
                     {"hashes",
                      {{"image", hex64(fnv1a64(png))},
                       {"annotation", hex64(fnv1a64(ann))},
                       {"density", hex64(fnv1a64(dens))}}}};
  write_file(out / ".journal" / (rec.sample_id + ".json"), journal.dump() + "\n");
  return rec;
}

}  // namespace

Manifest generate(const GenerationPlan& plan, const fs::path& out_dir, const GenerateOptions& opts) {
  const std::vector<SampleSpec> specs = expand_plan(plan);
  for (const char* sub : {"images", "ann", "density", ".journal"}) {
    std::error_code ec;
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  std::vector<SampleRecord> records(specs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;

  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      try {
        if (auto rec = resume_record(out_dir, specs[i]))
          records[i] = std::move(*rec);
        else
          records[i] = write_sample(plan, specs[i], out_dir);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failed.exchange(true)) {
          const std::string msg = "sample " + specs[i].sample_id() + ": " + e.what();
          const bool io = dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e);
          error = io ? std::make_exception_ptr(IoError(msg)) : std::make_exception_ptr(std::runtime_error(msg));
        }
        return;
      }
      const std::size_t d = done.fetch_add(1) + 1;
      if (opts.progress) {
        std::lock_guard lock(mu);
        opts.progress(d, specs.size());
      }
    }
  };

  const int n_workers = std::max(1, opts.workers);
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  Manifest m;
  m.plan = plan;
  m.samples = std::move(records);
  m.root = out_dir;
  m.stats.sample_count = m.samples.size();
  double req = 0.0, inframe = 0.0;
  for (const auto& r : m.samples) {
    req += r.requested_count;
    inframe += r.count_in_frame;
  }
  if (!m.samples.empty()) {
    m.stats.mean_requested_count = req / static_cast<double>(m.samples.size());
    m.stats.mean_count_in_frame = inframe / static_cast<double>(m.samples.size());
  }
  save_manifest(m, out_dir);
  return m;
}

}  // namespace crowdx
