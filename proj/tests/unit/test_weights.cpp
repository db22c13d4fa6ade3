#include <gtest/gtest.h>

#include "crowdx/error.hpp"
#include "crowdx/trainer.hpp"
#include "test_util.hpp"

using namespace crowdx;

namespace {

Tensor<float> fixed_input() {
  Tensor<float> t(1, 3, 32, 48);
  Rng rng(5);
  for (float& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

MiniESANet<float> trained_looking_net() {
  MiniESANet<float> net(NetConfig{}, 11);
  Rng rng(12);
  for (Param<float>* p : net.params())
    for (float& v : p->value.data) v += static_cast<float>(rng.uniform(-0.01, 0.01));
  net.set_output_scale(37.5f);
  return net;
}

}  // namespace

TEST(Weights, RoundTripIsBitIdentical) {
  MiniESANet<float> a = trained_looking_net();
  MiniESANet<float> b(NetConfig{}, 99);
  decode_weights(b, encode_weights(a));
  EXPECT_EQ(b.output_scale(), 37.5f);
  EXPECT_EQ(a.forward(fixed_input()).data, b.forward(fixed_input()).data);
}

TEST(Weights, FileRoundTrip) {
  TempDir dir("weights_rt");
  MiniESANet<float> a = trained_looking_net();
  save_weights(a, dir.path() / "w.cxwt");
  MiniESANet<float> b;
  load_weights(b, dir.path() / "w.cxwt");
  EXPECT_EQ(a.forward(fixed_input()).data, b.forward(fixed_input()).data);
}

TEST(Weights, LayoutHeader) {
  const std::string bytes = encode_weights(MiniESANet<float>());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "CXWT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version, little-endian
  const std::size_t n_tensors = MiniESANet<float>().params().size() + 1;
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), n_tensors);
}

TEST(Weights, WidthMismatchNamesTheLayer) {
  NetConfig wide;
  wide.front_channels = 24;
  MiniESANet<float> other(wide, 0);
  try {
    MiniESANet<float> net;
    decode_weights(net, encode_weights(other));
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_EQ(e.field(), "front.conv1.weight");
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

TEST(Weights, TruncationLeavesNetUntouched) {
  const std::string bytes = encode_weights(trained_looking_net());
  MiniESANet<float> net(NetConfig{}, 3);
  const auto before = net.forward(fixed_input()).data;
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{6}}) {
    EXPECT_THROW(decode_weights(net, std::string_view(bytes).substr(0, cut)), FormatError) << cut;
    EXPECT_EQ(net.forward(fixed_input()).data, before);
  }
}

TEST(Weights, BadMagicAndTrailingBytes) {
  std::string bytes = encode_weights(MiniESANet<float>());
  MiniESANet<float> net;
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_weights(net, bad), FormatError);
  EXPECT_THROW(decode_weights(net, bytes + "!"), FormatError);
}

TEST(Model, SaveAndLoadDirectory) {
  TempDir dir("model_rt");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 4;
  TrainedModel m{trained_looking_net(), {{0, 1e-4, 2.5, 3.0, 4.0}, {1, 1e-4, 2.0, std::nan(""), std::nan("")}},
                 "CP(30)", cfg};
  save_model(m, dir.path());
  const TrainedModel back = load_model(dir.path());
  EXPECT_EQ(back.train_predicate, "CP(30)");
  EXPECT_EQ(back.config.seed, 4u);
  ASSERT_EQ(back.history.size(), 2u);
  EXPECT_EQ(back.history[0].val_mae, 3.0);
  EXPECT_TRUE(std::isnan(back.history[1].val_mae));
  EXPECT_EQ(MiniESANet<float>(back.net).forward(fixed_input()).data, m.net.forward(fixed_input()).data);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "history.csv"));
}
