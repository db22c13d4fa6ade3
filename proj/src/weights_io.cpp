#include <bit>
#include <cstring>
#include <map>
#include <span>

#include "crowdx/error.hpp"
#include "crowdx/trainer.hpp"

namespace crowdx {

namespace {

constexpr char kMagic[4] = {'C', 'X', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;
// Not a learnable parameter, but it changes what forward() returns.
constexpr const char* kScaleName = "head.output_scale";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_tensor(std::string& out, const std::string& name, const std::vector<std::uint32_t>& dims,
                std::span<const float> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (std::uint32_t d : dims) put_u32(out, d);
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("weight file truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

std::string dims_string(const std::vector<std::uint32_t>& d) {
  std::string s = "(";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
  return s + ")";
}

std::vector<std::uint32_t> dims_of(const Tensor<float>& t) {
  return {static_cast<std::uint32_t>(t.n), static_cast<std::uint32_t>(t.c), static_cast<std::uint32_t>(t.h),
          static_cast<std::uint32_t>(t.w)};
}

}  // namespace

std::string encode_weights(const MiniESANet<float>& net) {
  const auto params = net.params();
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size() + 1));
  for (const Param<float>* p : params) put_tensor(out, p->name, dims_of(p->value), p->value.data);
  const float scale = net.output_scale();
  put_tensor(out, kScaleName, {1}, {&scale, 1});
  return out;
}

void decode_weights(MiniESANet<float>& net, std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not a CXWT weight file (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) throw FormatError("unsupported CXWT version " + std::to_string(version));
  const std::uint32_t count = r.u32("tensor count");

  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name(r.take(name_len, "name"));
    Entry e;
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("tensor " + name + ": implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.u32("dims"));
      n *= e.dims.back();
    }
    if (n > bytes.size()) throw FormatError("weight file truncated in tensor " + name);
    const std::string_view raw = r.take(4 * n, "tensor values");
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * k + b])) << (8 * b);
      e.values[k] = std::bit_cast<float>(u);
    }
    if (!entries.emplace(name, std::move(e)).second) throw FormatError("duplicate tensor " + name);
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");

  // Verify everything before writing anything into the network.
  auto params = net.params();
  for (Param<float>* p : params) {
    auto it = entries.find(p->name);
    if (it == entries.end()) throw ParameterError(p->name, "missing from the weight file");
    if (it->second.dims != dims_of(p->value))
      throw ParameterError(p->name, "shape mismatch: file has " + dims_string(it->second.dims) + ", network expects " +
                                        dims_string(dims_of(p->value)));
  }
  auto scale = entries.find(kScaleName);
  if (scale == entries.end()) throw ParameterError(kScaleName, "missing from the weight file");
  if (scale->second.values.size() != 1) throw ParameterError(kScaleName, "expected a single value");
  if (entries.size() != params.size() + 1) {
    for (const auto& [name, e] : entries) {
      bool known = name == kScaleName;
      for (Param<float>* p : params) known = known || p->name == name;
      if (!known) throw ParameterError(name, "not a tensor of this network");
    }
  }
  for (Param<float>* p : params) p->value.data.assign(entries[p->name].values.begin(), entries[p->name].values.end());
  net.set_output_scale(scale->second.values[0]);
}

void save_weights(const MiniESANet<float>& net, const std::filesystem::path& path) {
  write_file(path, encode_weights(net));
}

void load_weights(MiniESANet<float>& net, const std::filesystem::path& path) { decode_weights(net, read_file(path)); }

void save_model(const TrainedModel& model, const std::filesystem::path& dir) {
  save_weights(model.net, dir / "model.cxwt");
  nlohmann::json hist = nlohmann::json::array();
  for (const EpochRecord& r : model.history) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    hist.push_back({{"epoch", r.epoch},
                    {"lr", r.lr},
                    {"train_loss", num(r.train_loss)},
                    {"val_mae", num(r.val_mae)},
                    {"val_mse", num(r.val_mse)}});
  }
  nlohmann::json j = {{"format", "crowdx-model"},
                      {"weights", "model.cxwt"},
                      {"provenance", model.provenance()},
                      {"history", hist}};
  write_file(dir / "model.json", j.dump(2) + "\n");
  write_file(dir / "history.csv", model.history_csv());
}

TrainedModel load_model(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const fs::path weights = fs::is_directory(path) ? path / "model.cxwt" : path;
  const fs::path meta = weights.parent_path() / "model.json";
  TrainedModel m{MiniESANet<float>(), {}, {}, {}};
  if (fs::exists(meta)) {
    const auto j = nlohmann::json::parse(read_file(meta));
    const auto& prov = j.at("provenance");
    m.config = train_config_from_json(prov.at("config"));
    m.train_predicate = prov.value("train_predicate", "");
    for (const auto& h : j.value("history", nlohmann::json::array())) {
      auto num = [](const nlohmann::json& v) {
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
      };
      m.history.push_back(EpochRecord{h.at("epoch").get<int>(), h.at("lr").get<double>(), num(h.at("train_loss")),
                                      num(h.at("val_mae")), num(h.at("val_mse"))});
    }
    m.net = MiniESANet<float>(m.config.net);
  }
  load_weights(m.net, weights);
  return m;
}

}  // namespace crowdx
