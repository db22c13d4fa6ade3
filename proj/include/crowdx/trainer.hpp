#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdx/image_io.hpp"
#include "crowdx/metrics.hpp"
#include "crowdx/network.hpp"
#include "crowdx/subset.hpp"

namespace crowdx {

enum class Precision { F32, F64 };

struct TrainConfig {
  int batch_size = 8;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  double lr_initial = 1e-4;
  double lr_decay_factor = 10.0;
  int lr_decay_every_epochs = 3;
  int epochs = 30;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;

  /// Random training crops, aligned to the output stride. 0 or larger than
  /// the image means "whole image".
  int crop_width = 256;
  int crop_height = 192;
  /// Becomes the network's output scale: the raw output is trained against
  /// density * density_scale.
  double density_scale = 100.0;
  /// Rescale the batch gradient (weight decay included) to at most this
  /// global L2 norm. 0 disables clipping.
  double grad_clip_norm = 0.0;
  NetConfig net;

  double lr_at(int epoch) const;
  /// Throws ParameterError naming the offending field.
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
std::uint64_t train_config_hash(const TrainConfig& c);

/// Scratch training at desk scale: lr 1e-4, gradient norm clipped to 100,
/// decay every 10 epochs.
TrainConfig desk_train_config();
/// Batch 50, lr 1e-6: the fine-tuning setting for a pretrained front-end.
TrainConfig finetune_train_config();

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mae = 0.0;  // NaN without a validation set
  double val_mse = 0.0;
};

struct TrainedModel {
  MiniESANet<float> net;
  std::vector<EpochRecord> history;
  std::string train_predicate;
  TrainConfig config;

  /// epoch,lr,train_loss,val_mae,val_mse
  std::string history_csv() const;
  nlohmann::json provenance() const;
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Samples must share one resolution. `init`, when given, replaces the random
/// initialization (pretrain -> finetune).
TrainedModel train(const std::vector<std::shared_ptr<const LoadedSample>>& train_set,
                   const std::vector<std::shared_ptr<const LoadedSample>>& val_set, const TrainConfig& cfg,
                   const MiniESANet<float>* init = nullptr, std::string predicate = {},
                   const TrainCallbacks& callbacks = {});

/// Loads through the store so every read is logged.
TrainedModel train(SampleStore& store, const SubsetView& train_view, const SubsetView* val_view,
                   const TrainConfig& cfg, const MiniESANet<float>* init = nullptr,
                   const std::string& context = {});

/// Sum of the predicted density map. Images whose stride-4 grid exceeds the
/// attention cap are split into equal tiles whose counts are summed.
double predict_count(MiniESANet<float>& net, const RgbImage& image);

/// Tile rectangles (x, y, w, h) covering the image; a single tile when it fits.
struct Tile {
  int x, y, w, h;
};
std::vector<Tile> plan_tiles(int width, int height, int attention_cap);

/// Density map as a (1,1,H,W) tensor.
Tensor<float> density_tensor(const DensityMap& map, int x0 = 0, int y0 = 0, int w = -1, int h = -1);

// CXWT weight files: "CXWT", u32 version, u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, u32 dims, f32 values, all little-endian.
std::string encode_weights(const MiniESANet<float>& net);
/// Verifies every name and shape before touching `net`; FormatError on
/// truncation, ParameterError naming the tensor on a mismatch.
void decode_weights(MiniESANet<float>& net, std::string_view bytes);
void save_weights(const MiniESANet<float>& net, const std::filesystem::path& path);
void load_weights(MiniESANet<float>& net, const std::filesystem::path& path);

/// model.cxwt plus model.json (config, provenance, history) in `dir`.
void save_model(const TrainedModel& model, const std::filesystem::path& dir);
/// Accepts the directory or the .cxwt path; a sibling model.json supplies the
/// network shape when present.
TrainedModel load_model(const std::filesystem::path& path);

}  // namespace crowdx
