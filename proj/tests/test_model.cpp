#include <catch2/catch_amalgamated.hpp>

#include "dclstm/model.hpp"
#include "dclstm/train.hpp"
#include "oracles.hpp"

using namespace dclstm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.t = 8;
  cfg.h = cfg.w = 16;
  cfg.c = 1;
  cfg.conv3d_widths = {4, 8};
  cfg.hidden = 8;
  cfg.deform_per_quartile = 1;
  cfg.head_widths = {8, 8};
  cfg.num_classes = 2;
  cfg.seed = 99;
  return cfg;
}

Tensor<float> random_clip(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  Tensor<float> clip{Shape{cfg.t, cfg.h, cfg.w, cfg.c}};
  rng.fill_uniform(clip, 0.0f, 1.0f);
  return clip;
}

}  // namespace

TEST_CASE("shape walk matches the documented contract") {
  const ModelConfig cfg;  // defaults
  const auto wk = detail::walk_shapes(cfg);
  REQUIRE(wk.t_lstm == 16);
  REQUIRE(wk.s_lstm == 28);  // spatial extent entering the 2D head
  REQUIRE(wk.head_spatial == std::vector<int64_t>{14, 7, 3});
  REQUIRE(wk.s_final == 3);
}

TEST_CASE("build validates config arithmetic") {
  ModelConfig bad = tiny_config();
  bad.head_widths = {8, 8, 8, 8};  // 4 -> 2 -> 1 -> cannot pool again
  REQUIRE_THROWS_AS(build<float>(bad), std::invalid_argument);
  ModelConfig widths = tiny_config();
  widths.conv3d_widths = {4};
  REQUIRE_THROWS_AS(build<float>(widths), std::invalid_argument);
}

TEST_CASE("seeded initialization is deterministic") {
  const ModelConfig cfg = tiny_config();
  auto a = build<float>(cfg);
  auto b = build<float>(cfg);
  REQUIRE(a.store.names() == b.store.names());
  for (const auto& name : a.store.names())
    REQUIRE(oracles::max_abs_diff(a.store.value(name), b.store.value(name)) == 0.0);

  ModelConfig other = cfg;
  other.seed = cfg.seed + 1;
  auto c = build<float>(other);
  double diff = 0;
  for (const auto& name : a.store.names()) diff += oracles::max_abs_diff(a.store.value(name), c.store.value(name));
  REQUIRE(diff > 0.0);
}

TEST_CASE("forward is deterministic and logits have num_classes entries") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  auto clip = random_clip(cfg, 5);
  Tape<float> t1, t2;
  auto l1 = forward(t1, mp, clip);
  auto l2 = forward(t2, mp, clip);
  REQUIRE(t1.value(l1).shape() == Shape{2});
  REQUIRE(oracles::max_abs_diff(t1.value(l1), t2.value(l2)) == 0.0);
}

TEST_CASE("zeroed final layer gives a uniform softmax") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  mp.store.value("fc.weight") = Tensor<float>::zeros(mp.store.value("fc.weight").shape());
  mp.store.value("fc.bias") = Tensor<float>::zeros(mp.store.value("fc.bias").shape());
  Tape<float> tp;
  auto logits = forward(tp, mp, random_clip(cfg, 7));
  const auto& lv = tp.value(logits);
  for (int64_t i = 0; i < lv.numel(); ++i) REQUIRE(lv[i] == 0.0f);
  // -log softmax = log(num_classes) for every label
  auto loss = cross_entropy(tp, logits, 1);
  REQUIRE(tp.value(loss)[0] == Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("forward rejects mismatched clips") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  Tape<float> tp;
  REQUIRE_THROWS_AS(forward(tp, mp, Tensor<float>::zeros(Shape{8, 16, 15, 1})), std::invalid_argument);
}

TEST_CASE("tiny config forward matches a hand-composed layer stack") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  auto clip = random_clip(cfg, 11);

  Tape<float> tp;
  auto logits = forward(tp, mp, clip);

  // manual composition on plain tensors
  auto& st = mp.store;
  Tensor<float> x = conv3d(clip, st.value("conv3d.0.weight"), st.value("conv3d.0.bias"), 1, 1, 1, 1, 1, 1);
  x = relu(x);
  x = maxpool3d(x, {1, 2, 2}, {1, 2, 2});
  x = conv3d(x, st.value("conv3d.1.weight"), st.value("conv3d.1.bias"), 1, 1, 1, 1, 1, 1);
  x = relu(x);
  x = maxpool3d(x, {2, 2, 2}, {2, 2, 2});
  REQUIRE(x.shape() == Shape{4, 4, 4, 8});

  // plain-tensor ConvLSTM recurrence
  const int64_t t_n = 4, hh = 4, ww = 4, ch = 8;
  const auto schedule = deformable_schedule(t_n, cfg.deform_per_quartile);
  Tensor<float> h = Tensor<float>::zeros(Shape{hh, ww, ch});
  Tensor<float> c = Tensor<float>::zeros(Shape{hh, ww, ch});
  std::vector<Tensor<float>> hs;
  for (int64_t t = 0; t < t_n; ++t) {
    Tensor<float> xt{Shape{hh, ww, ch},
                     std::vector<float>(x.data() + t * hh * ww * ch, x.data() + (t + 1) * hh * ww * ch)};
    auto conv_nb = [&](const std::string& name, const Tensor<float>& in) {
      return conv2d(in, st.value(name), Tensor<float>{}, 1, 1, 1, 1);
    };
    Tensor<float> xi = conv_nb("convlstm.input_i.weight", xt);
    Tensor<float> xf = conv_nb("convlstm.input_f.weight", xt);
    Tensor<float> xo = conv_nb("convlstm.input_o.weight", xt);
    Tensor<float> xg;
    const bool deform = std::find(schedule.begin(), schedule.end(), t) != schedule.end();
    if (deform) {
      Conv2DParams<float> pred{st.value("convlstm.offset.weight"), st.value("convlstm.offset.bias"), 1, 1, 1, 1};
      auto field = offset_predictor(xt, pred);
      xg = deformable_conv2d(xt, st.value("convlstm.input_g.weight"), Tensor<float>{}, field.offsets, 1, 1, 1, 1);
    } else {
      xg = conv_nb("convlstm.input_g.weight", xt);
    }
    Tensor<float> gap = reduce_mean(h, {0, 1});
    auto gate = [&](const Tensor<float>& conv_out, const std::string& scale_name, const std::string& bias_name) {
      Tensor<float> pre = conv_out;
      const Tensor<float>& sc = st.value(scale_name);
      const Tensor<float>& bias = st.value(bias_name);
      for (int64_t r = 0; r < hh * ww; ++r)
        for (int64_t j = 0; j < ch; ++j) pre[r * ch + j] += sc[j] * gap[j] + bias[j];
      return sigmoid(pre);
    };
    Tensor<float> gi = gate(xi, "convlstm.hidden_i.scale", "convlstm.bias_i");
    Tensor<float> gf = gate(xf, "convlstm.hidden_f.scale", "convlstm.bias_f");
    Tensor<float> go = gate(xo, "convlstm.hidden_o.scale", "convlstm.bias_o");
    Tensor<float> hg = conv_nb("convlstm.hidden_g.weight", h);
    Tensor<float> pre_g = add(xg, hg);
    const Tensor<float>& bg = st.value("convlstm.bias_g");
    for (int64_t r = 0; r < hh * ww; ++r)
      for (int64_t j = 0; j < ch; ++j) pre_g[r * ch + j] += bg[j];
    Tensor<float> gg = dclstm::tanh(pre_g);
    c = add(mul(gf, c), mul(gi, gg));
    h = mul(go, dclstm::tanh(c));
    hs.push_back(h);
  }

  // shared 2D head per frame, then fusion
  std::vector<Tensor<float>> feats;
  for (const auto& hframe : hs) {
    Tensor<float> f = hframe;
    for (size_t i = 0; i < cfg.head_widths.size(); ++i) {
      const std::string base = "head." + std::to_string(i) + ".";
      f = avgpool2d(relu(conv2d(f, st.value(base + "weight"), st.value(base + "bias"), 1, 1, 1, 1)), {2, 2},
                    {2, 2});
    }
    feats.push_back(f);
  }
  const int64_t cf = cfg.head_widths.back();
  Tensor<float> pooled = Tensor<float>::zeros(Shape{cf});
  int64_t count = 0;
  for (const auto& f : feats) {
    const int64_t rows = f.numel() / cf;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < cf; ++j) pooled[j] += f[r * cf + j];
    count += rows;
  }
  for (int64_t j = 0; j < cf; ++j) pooled[j] /= static_cast<float>(count);
  Tensor<float> want = matmul(pooled.reshaped(Shape{1, cf}), st.value("fc.weight")).reshaped(Shape{2});
  want = add(want, st.value("fc.bias"));

  REQUIRE(oracles::max_rel_err(tp.value(logits), want) < 1e-4);
}

TEST_CASE("gradient reaches every named parameter") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  Tape<float> tp;
  std::unordered_map<std::string, Var<float>> vars;
  auto logits = forward(tp, mp, random_clip(cfg, 13), true, &vars);
  tp.backward(cross_entropy(tp, logits, 1));
  for (const auto& name : mp.store.names()) {
    INFO("parameter " << name);
    const auto& g = tp.grad(vars.at(name));
    double norm = 0;
    for (int64_t i = 0; i < g.numel(); ++i) norm += std::abs(static_cast<double>(g[i]));
    REQUIRE(norm > 0.0);
  }
}

TEST_CASE("baseline config drops the offset predictor") {
  ModelConfig cfg = tiny_config();
  cfg.deform_per_quartile = 0;
  auto mp = build<float>(cfg);
  REQUIRE_FALSE(mp.store.has("convlstm.offset.weight"));
  REQUIRE_FALSE(mp.store.has("convlstm.offset.bias"));
  // forward still runs and no parameter is dead
  Tape<float> tp;
  std::unordered_map<std::string, Var<float>> vars;
  auto logits = forward(tp, mp, random_clip(cfg, 17), true, &vars);
  tp.backward(cross_entropy(tp, logits, 0));
  for (const auto& name : mp.store.names()) {
    const auto& g = tp.grad(vars.at(name));
    double norm = 0;
    for (int64_t i = 0; i < g.numel(); ++i) norm += std::abs(static_cast<double>(g[i]));
    REQUIRE(norm > 0.0);
  }
}

TEST_CASE("param_count closed forms") {
  SECTION("a single 3x3 conv with bias counts 10") {
    ParamStore<float> store;
    store.add("conv.weight", Tensor<float>::zeros(Shape{3, 3, 1, 1}));
    store.add("conv.bias", Tensor<float>::zeros(Shape{1}));
    REQUIRE(store.param_count() == 10);
  }
  SECTION("default config matches the per-layer arithmetic") {
    auto mp = build<float>(ModelConfig{});
    const int64_t conv3d_p = (27 * 3 * 32 + 32) + (27 * 32 * 64 + 64);
    const int64_t lstm_p = 4 * (9 * 64 * 64)      // input-to-state convs
                           + 3 * 64               // per-channel hidden scales
                           + (9 * 64 * 64)        // hidden-to-state conv for g
                           + 4 * 64               // gate biases
                           + (9 * 64 * 18 + 18);  // offset predictor
    const int64_t head_p = (9 * 64 * 64 + 64) + (9 * 64 * 96 + 96) + (9 * 96 * 128 + 128);
    const int64_t fc_p = 128 * 17 + 17;
    REQUIRE(param_count(mp) == conv3d_p + lstm_p + head_p + fc_p);
  }
  SECTION("each extra class costs one fc column plus one bias") {
    ModelConfig a = tiny_config();
    ModelConfig b = tiny_config();
    b.num_classes = a.num_classes + 3;
    REQUIRE(param_count(build<float>(b)) - param_count(build<float>(a)) == 3 * (8 + 1));
    // at the default 128-wide feature vector that is 129 per class
    ModelConfig d17, d34;
    d34.num_classes = 34;
    REQUIRE(param_count(build<float>(d34)) - param_count(build<float>(d17)) == 17 * 129);
  }
}

TEST_CASE("tiny model memorizes a single clip") {
  const ModelConfig cfg = tiny_config();
  auto mp = build<float>(cfg);
  auto clip = random_clip(cfg, 23);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  Optimizer<float> opt(tc);
  double final_loss = 1e9;
  for (int step = 0; step < 50 && final_loss >= 0.05; ++step) {
    std::vector<Tensor<float>> grads;
    bool correct = false;
    clip_gradients(mp, clip, 1, grads, final_loss, correct);
    for (size_t p = 0; p < mp.store.count(); ++p) mp.store.grad(p) = grads[p];
    opt.step(mp.store);
  }
  REQUIRE(final_loss < 0.1);
}
