#include "crowdx/subset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <regex>

#include "crowdx/error.hpp"

namespace crowdx {

using nlohmann::json;

bool Clause::matches(const SampleRecord& r) const {
  if (pitches && std::find(pitches->begin(), pitches->end(), r.pitch_deg) == pitches->end()) return false;
  if (count_lo && r.count_in_frame < *count_lo) return false;
  if (count_hi && r.count_in_frame >= *count_hi) return false;
  if (background && r.background.kind != *background) return false;
  if (resolution && !(r.resolution == *resolution)) return false;
  return true;
}

json Clause::to_json() const {
  json j = json::object();
  if (pitches) j["pitch_deg"] = *pitches;
  if (count_lo || count_hi) {
    j["count_in_frame"] = {{"lo", count_lo ? json(*count_lo) : json(nullptr)},
                           {"hi", count_hi ? json(*count_hi) : json(nullptr)}};
  }
  if (background) j["background"] = crowdx::to_string(*background);
  if (resolution) j["resolution"] = {resolution->width, resolution->height};
  return j;
}

Clause Clause::from_json(const json& j) {
  Clause c;
  if (j.contains("pitch_deg")) c.pitches = j["pitch_deg"].get<std::vector<double>>();
  if (j.contains("count_in_frame")) {
    const json& r = j["count_in_frame"];
    if (!r.at("lo").is_null()) c.count_lo = r["lo"].get<int>();
    if (!r.at("hi").is_null()) c.count_hi = r["hi"].get<int>();
  }
  if (j.contains("background")) c.background = background_kind_from_string(j["background"].get<std::string>());
  if (j.contains("resolution")) c.resolution = Resolution{j["resolution"].at(0).get<int>(), j["resolution"].at(1).get<int>()};
  return c;
}

Clause Clause::intersect(const Clause& o) const {
  Clause c = *this;
  if (o.pitches) {
    if (!c.pitches) {
      c.pitches = o.pitches;
    } else {
      std::vector<double> both;
      for (double p : *c.pitches)
        if (std::find(o.pitches->begin(), o.pitches->end(), p) != o.pitches->end()) both.push_back(p);
      c.pitches = both;
    }
  }
  if (o.count_lo) c.count_lo = c.count_lo ? std::max(*c.count_lo, *o.count_lo) : *o.count_lo;
  if (o.count_hi) c.count_hi = c.count_hi ? std::min(*c.count_hi, *o.count_hi) : *o.count_hi;
  if (o.background) {
    if (c.background && *c.background != *o.background) c.pitches = std::vector<double>{};  // unsatisfiable
    c.background = o.background;
  }
  if (o.resolution) {
    if (c.resolution && !(*c.resolution == *o.resolution)) c.pitches = std::vector<double>{};
    c.resolution = o.resolution;
  }
  return c;
}

bool Predicate::matches(const SampleRecord& r) const {
  return std::any_of(any_of.begin(), any_of.end(), [&](const Clause& c) { return c.matches(r); });
}

json Predicate::to_json() const {
  json arr = json::array();
  for (const Clause& c : any_of) arr.push_back(c.to_json());
  return json{{"any_of", arr}};
}

Predicate Predicate::from_json(const json& j) {
  Predicate p;
  for (const json& c : j.at("any_of")) p.any_of.push_back(Clause::from_json(c));
  return p;
}

Predicate Predicate::intersect(const Predicate& other) const {
  Predicate p;
  for (const Clause& a : any_of)
    for (const Clause& b : other.any_of) p.any_of.push_back(a.intersect(b));
  return p;
}

namespace {

std::string strip(const std::string& s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == sep && depth == 0) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

Clause parse_term(const std::string& term) {
  static const std::regex kTerm(R"(^([A-Za-z]+)\((.*)\)$)");
  std::smatch m;
  if (term == "ALL" || term == "all") return Clause{};
  if (!std::regex_match(term, m, kTerm)) throw ParameterError("subset", "cannot parse term '" + term + "'");
  const std::string head = m[1];
  const std::string arg = m[2];
  Clause c;
  try {
    if (head == "CP") {
      std::vector<double> ps;
      for (const std::string& p : split(arg, ',')) ps.push_back(std::stod(p));
      c.pitches = ps;
    } else if (head == "PN") {
      static const std::regex kRange(R"(^(\d+)-(\d+)$)");
      static const std::regex kOpen(R"(^(\d+)\+$)");
      std::smatch r;
      if (arg == "all") {
      } else if (std::regex_match(arg, r, kRange)) {
        c.count_lo = std::stoi(r[1]);
        c.count_hi = std::stoi(r[2]);
        if (*c.count_hi <= *c.count_lo) throw ParameterError("subset", "empty PN range '" + arg + "'");
      } else if (std::regex_match(arg, r, kOpen)) {
        c.count_lo = std::stoi(r[1]);
      } else {
        throw ParameterError("subset", "bad PN range '" + arg + "'");
      }
    } else if (head == "BG") {
      c.background = background_kind_from_string(arg);
    } else if (head == "RES") {
      static const std::regex kRes(R"(^(\d+)x(\d+)$)");
      std::smatch r;
      if (!std::regex_match(arg, r, kRes)) throw ParameterError("subset", "bad resolution '" + arg + "'");
      c.resolution = Resolution{std::stoi(r[1]), std::stoi(r[2])};
    } else {
      throw ParameterError("subset", "unknown subset kind '" + head + "'");
    }
  } catch (const std::invalid_argument&) {
    throw ParameterError("subset", "cannot parse term '" + term + "'");
  }
  return c;
}

}  // namespace

Predicate parse_predicate(const std::string& expr) {
  const std::string s = strip(expr);
  if (s.empty()) throw ParameterError("subset", "empty subset expression");
  Predicate p;
  for (const std::string& alt : split(s, '|')) {
    Clause c;
    for (const std::string& term : split(alt, '&')) c = c.intersect(parse_term(term));
    p.any_of.push_back(c);
  }
  return p;
}

const char* to_string(SplitRole r) {
  switch (r) {
    case SplitRole::Train: return "train";
    case SplitRole::Test: return "test";
    default: return "all";
  }
}

json SubsetView::describe() const {
  return json{{"label", label}, {"predicate", predicate.to_json()}, {"role", to_string(role)}, {"size", size()}};
}

SubsetView filter(std::shared_ptr<const Manifest> manifest, const Predicate& pred, std::string label) {
  SubsetView v;
  v.label = std::move(label);
  v.predicate = pred;
  for (std::size_t i = 0; i < manifest->samples.size(); ++i)
    if (pred.matches(manifest->samples[i])) v.indices.push_back(i);
  v.manifest = std::move(manifest);
  return v;
}

SubsetView filter(std::shared_ptr<const Manifest> manifest, const std::string& expr) {
  return filter(std::move(manifest), parse_predicate(expr), strip(expr));
}

SubsetView unite(const SubsetView& a, const SubsetView& b, std::string label) {
  if (a.manifest != b.manifest) throw ValidationError("cannot unite subsets of different manifests");
  SubsetView v;
  v.manifest = a.manifest;
  v.label = label.empty() ? a.label + "|" + b.label : std::move(label);
  v.predicate = a.predicate;
  v.predicate.any_of.insert(v.predicate.any_of.end(), b.predicate.any_of.begin(), b.predicate.any_of.end());
  std::set_union(a.indices.begin(), a.indices.end(), b.indices.begin(), b.indices.end(),
                 std::back_inserter(v.indices));
  v.role = a.role == b.role ? a.role : SplitRole::All;
  return v;
}

bool assigned_to_test(const std::string& sample_id, const SplitConfig& cfg) {
  // Golden-ratio (Weyl) sequence over the sample ordinal: consecutive ids
  // spread evenly, so small subsets land close to the requested fraction.
  constexpr double kStep = std::numbers::phi - 1.0;
  const double offset = static_cast<double>(splitmix64(cfg.split_seed) >> 11) * 0x1.0p-53;
  double ordinal;
  if (!sample_id.empty() && std::all_of(sample_id.begin(), sample_id.end(), ::isdigit))
    ordinal = static_cast<double>(std::stoull(sample_id));
  else
    ordinal = static_cast<double>(fnv1a64(sample_id) >> 11);
  const double u = std::fmod(offset + ordinal * kStep, 1.0);
  return u < cfg.test_fraction;
}

std::pair<SubsetView, SubsetView> train_test_split(const SubsetView& subset, const SplitConfig& cfg) {
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0))
    throw ParameterError("test_fraction", "must lie in (0, 1)");
  if (subset.size() < 2)
    throw ValidationError("subset " + subset.label + " has " + std::to_string(subset.size()) +
                          " samples; a train/test split needs at least 2");
  SubsetView train = subset, test = subset;
  train.indices.clear();
  test.indices.clear();
  train.role = SplitRole::Train;
  test.role = SplitRole::Test;
  for (std::size_t idx : subset.indices) {
    if (assigned_to_test(subset.manifest->samples[idx].sample_id, cfg))
      test.indices.push_back(idx);
    else
      train.indices.push_back(idx);
  }
  return {train, test};
}

const char* to_string(AccessPurpose p) {
  switch (p) {
    case AccessPurpose::Train: return "train";
    case AccessPurpose::Validate: return "validate";
    default: return "evaluate";
  }
}

std::shared_ptr<const LoadedSample> SampleStore::load(std::size_t index, AccessPurpose purpose,
                                                      const std::string& context) {
  {
    std::lock_guard lock(mu_);
    log_.push_back(AccessEvent{index, purpose, context});
    if (cache_.size() < manifest_->samples.size()) cache_.resize(manifest_->samples.size());
    if (cache_[index]) return cache_[index];
  }
  const SampleRecord& rec = manifest_->samples.at(index);
  auto s = std::make_shared<LoadedSample>();
  s->index = index;
  s->sample_id = rec.sample_id;
  s->image = read_png(manifest_->path_of(rec.image_path));
  s->density = read_density(manifest_->path_of(rec.density_path));
  s->count_in_frame = rec.count_in_frame;
  std::lock_guard lock(mu_);
  if (!cache_[index]) cache_[index] = std::move(s);
  return cache_[index];
}

std::vector<std::shared_ptr<const LoadedSample>> SampleStore::load_all(const SubsetView& view,
                                                                       AccessPurpose purpose,
                                                                       const std::string& context) {
  std::vector<std::shared_ptr<const LoadedSample>> out;
  out.reserve(view.size());
  for (std::size_t idx : view.indices) out.push_back(load(idx, purpose, context));
  return out;
}

std::vector<AccessEvent> SampleStore::log() const {
  std::lock_guard lock(mu_);
  return log_;
}

void SampleStore::clear_log() {
  std::lock_guard lock(mu_);
  log_.clear();
}

}  // namespace crowdx
