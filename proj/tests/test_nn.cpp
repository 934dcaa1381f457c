#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "osf/encoder.hpp"
#include "osf/nn/optim.hpp"
#include "osf/nn/tensor.hpp"

using namespace osf;
using nn::Mat;
using nn::Tape;
using nn::Tensor;

namespace {

Mat<double> randn(long r, long c, Rng& rng, double s = 1.0) {
  Mat<double> m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, s);
  return m;
}

}  // namespace

TEST_CASE("basic op gradients match finite differences") {
  Rng rng(11);
  nn::Param<double> a, b;
  a.name = "a"; a.value = randn(3, 4, rng);
  b.name = "b"; b.value = randn(4, 5, rng);
  std::vector<nn::Param<double>*> ps = {&a, &b};

  auto build = [&](Tape<double>& t) {
    auto x = t.leaf(a);
    auto w = t.leaf(b);
    auto y = nn::gelu(nn::matmul(x, w));
    return nn::mean_all(nn::mul(y, y));
  };
  auto f = [&]() {
    Tape<double> t;
    return build(t).val()(0, 0);
  };
  {
    nn::zero_grads(ps);
    Tape<double> t;
    auto z = build(t);
    t.backward(z);
  }
  auto res = testing::fd_check(ps, f, 40, rng);
  CHECK(res.failed == 0);
}

TEST_CASE("layer_norm / softmax / l2_normalize gradients") {
  Rng rng(3);
  nn::Param<double> x, g, bb;
  x.value = randn(5, 8, rng);
  g.value = Mat<double>::Ones(1, 8) + 0.1 * randn(1, 8, rng);
  bb.value = randn(1, 8, rng, 0.2);
  std::vector<nn::Param<double>*> ps = {&x, &g, &bb};
  auto build = [&](Tape<double>& t) {
    auto xx = t.leaf(x);
    auto y = nn::layer_norm(xx, t.leaf(g), t.leaf(bb));
    y = nn::softmax_rows(y);
    y = nn::l2_normalize_rows(nn::add(y, xx));
    Mat<double> target = Mat<double>::Zero(5, 8);
    return nn::mse_loss(y, target);
  };
  {
    nn::zero_grads(ps);
    Tape<double> t;
    auto z = build(t);
    t.backward(z);
  }
  auto f = [&]() {
    Tape<double> t;
    return build(t).val()(0, 0);
  };
  auto res = testing::fd_check(ps, f, 40, rng);
  CHECK(res.failed == 0);
}

TEST_CASE("self_attention gradient and causality") {
  Rng rng(7);
  const int B = 2, T = 5, heads = 2, d = 6;
  nn::Param<double> q, k, v;
  q.value = randn(B * T, d, rng);
  k.value = randn(B * T, d, rng);
  v.value = randn(B * T, d, rng);
  std::vector<nn::Param<double>*> ps = {&q, &k, &v};
  for (bool causal : {false, true}) {
    CAPTURE(causal);
    auto build = [&](Tape<double>& t) {
      auto a = nn::self_attention(t.leaf(q), t.leaf(k), t.leaf(v), B, T, heads, causal);
      return nn::mean_all(nn::mul(a, a));
    };
    {
      nn::zero_grads(ps);
      Tape<double> t;
      auto z = build(t);
      t.backward(z);
    }
    auto f = [&]() {
      Tape<double> t;
      return build(t).val()(0, 0);
    };
    auto res = testing::fd_check(ps, f, 40, rng);
    CHECK(res.failed == 0);
  }
}

TEST_CASE("encoder forward shapes and CLS readout") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<double>::init(cfg, 5);
  Rng rng(9);
  Mat<double> windows = randn(2 * cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Tape<double> tape;
  auto toks = enc.forward_tokens(tape, windows, 2);
  CHECK(toks.val().rows() == 2 * 361);
  CHECK(toks.val().cols() == cfg.width);
  Tape<double> tape2;
  auto cls = enc.forward_cls(tape2, windows, 2);
  CHECK(cls.val().rows() == 2);
  // CLS state matches the token-grid readout
  CHECK((cls.val().row(0) - toks.val().row(0)).norm() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cls.val().row(0).norm() > 0);
}

TEST_CASE("tiny encoder gradcheck vs central differences") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<double>::init(cfg, 17);
  Rng rng(23);
  const int B = 1;
  Mat<double> windows = randn(B * cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Mat<double> probe = randn(B, cfg.width, rng);

  auto loss_val = [&]() {
    Tape<double> t;
    auto cls = enc.forward_cls(t, windows, B);
    return cls.val().cwiseProduct(probe).sum();
  };
  auto params = enc.weights.all();
  {
    nn::zero_grads(params);
    Tape<double> t;
    auto cls = enc.forward_cls(t, windows, B);
    auto loss = nn::sum_all(nn::mul(cls, t.constant(probe)));
    t.backward(loss);
  }
  auto res = testing::fd_check(params, loss_val, 120, rng, 1e-3, 1e-5);
  CHECK(res.checked >= 100);
  CHECK(res.failed == 0);
  MESSAGE("worst relative error ", res.worst_rel);
}

TEST_CASE("causal encoder: future perturbation cannot reach earlier states") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<double>::init(cfg, 2);
  Rng rng(4);
  Mat<double> windows = randn(cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Tape<double> t1;
  auto a = enc.forward_tokens(t1, windows, 1, /*causal=*/true, /*trainable=*/false);
  Mat<double> perturbed = windows;
  const int tok = 200;  // perturb signal token 200 (sequence position 201)
  perturbed.row(tok).array() += 0.7;
  Tape<double> t2;
  auto b = enc.forward_tokens(t2, perturbed, 1, true, false);
  // positions before the perturbed token are bit-for-bit unaffected
  double before = (a.val().topRows(tok + 1) - b.val().topRows(tok + 1)).cwiseAbs().maxCoeff();
  double after = (a.val().bottomRows(360 - tok) - b.val().bottomRows(360 - tok))
                     .cwiseAbs()
                     .maxCoeff();
  CHECK(before <= 1e-6);
  CHECK(after > 1e-6);
}

TEST_CASE("encoder: channel permutation changes the embedding") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<double>::init(cfg, 8);
  Rng rng(12);
  Mat<double> w1 = randn(cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Mat<double> w2 = w1;
  // swap channels 0 and 5 (rows 0..29 with 150..179)
  w2.middleRows(0, 30).swap(w2.middleRows(150, 30));
  Tape<double> t;
  auto e1 = enc.forward_cls(t, w1, 1, false);
  Tape<double> t2;
  auto e2 = enc.forward_cls(t2, w2, 1, false);
  CHECK((e1.val() - e2.val()).norm() > 1e-6);
}

TEST_CASE("encoder batch independence and permutation") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<double>::init(cfg, 31);
  Rng rng(5);
  Mat<double> wa = randn(cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Mat<double> wb = randn(cfg.signal_tokens(), cfg.token_window, rng, 0.5);
  Mat<double> batch_ab(2 * cfg.signal_tokens(), cfg.token_window);
  batch_ab << wa, wb;
  Mat<double> batch_ba(2 * cfg.signal_tokens(), cfg.token_window);
  batch_ba << wb, wa;
  Tape<double> t1, t2;
  auto e_ab = enc.forward_cls(t1, batch_ab, 2, false);
  auto e_ba = enc.forward_cls(t2, batch_ba, 2, false);
  CHECK((e_ab.val().row(0) - e_ba.val().row(1)).norm() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((e_ab.val().row(1) - e_ba.val().row(0)).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("param_count matches enumerated weights; presets near paper sizes") {
  for (const char* preset : {"tiny", "vit-1m", "vit-5m", "vit-85m"}) {
    auto cfg = EncoderConfig::from_preset(preset);
    auto w = init_encoder_weights<float>(cfg, 0);
    CHECK(param_count(cfg) == w.total_size());
  }
  // vit-85m: within 2% of 85.5M
  CHECK(std::abs(param_count(EncoderConfig::from_preset("vit-85m")) / 85.5e6 - 1.0) < 0.02);
  // monotone in mlp_dim
  auto c1 = EncoderConfig::from_preset("tiny");
  auto c2 = c1;
  c2.mlp_dim *= 2;
  CHECK(param_count(c2) > param_count(c1));
}

TEST_CASE("lr schedule: linear warmup then cosine to ~0") {
  const long total = 1000;
  const double base = 0.4;
  // warmup covers 100 steps; step 50 is half of base
  CHECK(nn::lr_at(50, total, base) == doctest::Approx(base / 2).epsilon(1e-12));
  CHECK(nn::lr_at(100, total, base) == doctest::Approx(base).epsilon(1e-12));
  CHECK(nn::lr_at(total - 1, total, base) <= 1e-3 * base);
  for (long s = 1; s < 100; ++s)
    CHECK(nn::lr_at(s, total, base) - nn::lr_at(s - 1, total, base) ==
          doctest::Approx(base / 100).epsilon(1e-9));
  // pointwise closed form on the cosine part
  for (long s : {100L, 300L, 600L, 999L}) {
    double expect = base * 0.5 * (1 + std::cos(M_PI * double(s - 100) / 900));
    CHECK(nn::lr_at(s, total, base) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("AdamW updates and clips") {
  nn::Param<float> p;
  p.value = Mat<float>::Constant(1, 2, 1.0f);
  p.ensure_state();
  p.grad << 3.0f, 4.0f;  // norm 5
  std::vector<nn::Param<float>*> ps = {&p};
  nn::AdamW<float> opt(0.9, 0.95, 0.0);
  opt.step(ps, 0.1, /*clip=*/1.0);
  // after clipping grad is (0.6, 0.8); adam with bias correction gives step lr*g/|g|
  CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1).epsilon(1e-4));
  CHECK(p.value(0, 1) == doctest::Approx(1.0 - 0.1).epsilon(1e-4));
}

TEST_CASE("checkpoint round-trip") {
  auto cfg = EncoderConfig::from_preset("tiny");
  auto enc = Encoder<float>::init(cfg, 77);
  CheckpointMeta meta{"dino", 123, 77, "abc"};
  auto dir = std::filesystem::temp_directory_path() / "osf_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, cfg, enc.weights, meta);
  CheckpointMeta back;
  auto enc2 = load_checkpoint(dir, &back);
  CHECK(back.objective == "dino");
  CHECK(back.steps == 123);
  for (auto& [name, p] : enc.weights.params)
    CHECK((p.value - enc2.weights.at(name).value).norm() == 0.0f);
  std::filesystem::remove_all(dir);
}
