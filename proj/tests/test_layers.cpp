#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mrc/layers.hpp"
#include "support/gradcheck.hpp"

using mrc::ParameterStore;
using mrc::Shape;
using mrc::SimilarityKind;
using mrc::Tensor;
using DTensor = mrc::TensorT<double>;
using mrc::concat;

TEST_CASE("parameter names must be unique") {
  ParameterStore<float> store;
  store.add_zeros("w", {2});
  CHECK_THROWS_AS(store.add_zeros("w", {2}), mrc::ConfigError);
}

TEST_CASE("masked_softmax basic cases") {
  auto logits = Tensor::from_data({3}, {1, 1, 1});
  auto mask = Tensor::from_data({3}, {1, 1, 0});
  auto p = masked_softmax(logits, mask);
  CHECK(p.value()[0] == doctest::Approx(0.5));
  CHECK(p.value()[1] == doctest::Approx(0.5));
  CHECK(p.value()[2] == 0.0f);  // exactly zero

  auto none = Tensor::from_data({3}, {0, 0, 0});
  auto z = masked_softmax(logits, none);
  CHECK(z.value() == std::vector<float>{0, 0, 0});

  auto two = masked_softmax(Tensor::from_data({2}, {2, 0}), Tensor::from_data({2}, {1, 1}));
  CHECK(two.value()[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(two.value()[1] == doctest::Approx(0.1192).epsilon(1e-4));
}

TEST_CASE("masked_softmax invariants on random inputs") {
  mrc::Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    int rows = 1 + rng.uniform_int(4), cols = 1 + rng.uniform_int(5);
    auto logits = Tensor::uniform({rows, cols}, rng, -3, 3);
    std::vector<float> mv(static_cast<size_t>(rows) * cols);
    for (auto& v : mv) v = rng.bernoulli(0.7) ? 1.0f : 0.0f;
    auto mask = Tensor::from_data({rows, cols}, mv);
    auto p = masked_softmax(logits, mask);
    for (int r = 0; r < rows; ++r) {
      float row_sum = 0;
      bool any = false;
      for (int c = 0; c < cols; ++c) {
        float v = p.at({r, c});
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        if (mv[r * cols + c] == 0.0f) CHECK(v == 0.0f);
        if (mv[r * cols + c] == 1.0f) any = true;
        row_sum += v;
      }
      CHECK(std::abs(row_sum - (any ? 1.0f : 0.0f)) < 1e-6f);
    }
  }
}

TEST_CASE("mask_logits basic contracts") {
  auto logits = Tensor::from_data({3}, {1, -2, 3});
  auto ones = Tensor::from_data({3}, {1, 1, 1});
  CHECK(mask_logits(logits, ones).value() == logits.value());

  auto single = mask_logits(logits, Tensor::from_data({3}, {0, 1, 0}));
  auto p = masked_softmax(logits, Tensor::from_data({3}, {0, 1, 0}));
  CHECK(p.value()[1] == doctest::Approx(1.0));
}

TEST_CASE("softmax of mask_logits equals masked_softmax") {
  mrc::Rng rng(9);
  auto logits = Tensor::uniform({3, 4}, rng, -2, 2);
  std::vector<float> mv{1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1};
  auto mask = Tensor::from_data({3, 4}, mv);
  auto a = masked_softmax(logits, mask);
  // plain softmax over the masked logits
  auto ml = mask_logits(logits, mask);
  auto m = reduce_max(ml, -1, true);
  auto e = mrc::exp(sub(ml, m));
  auto b = div(e, reduce_sum(e, -1, true));
  for (size_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a.value()[i] - b.value()[i]) < 1e-6f);
}

TEST_CASE("similarity: trilinear with zero weights") {
  mrc::Rng rng(1);
  ParameterStore<float> store;
  mrc::Similarity<float> sim(SimilarityKind::TriLinear, 3, store, "sim", rng);
  for (auto& [name, p] : store.items())
    std::fill(p.value().begin(), p.value().end(), 0.0f);
  auto h = Tensor::uniform({1, 2, 3}, rng, -1, 1);
  auto u = Tensor::uniform({1, 4, 3}, rng, -1, 1);
  auto s = sim(h, u);
  CHECK(s.shape() == Shape{1, 2, 4});
  for (float v : s.value()) CHECK(v == 0.0f);
}

TEST_CASE("similarity: dot product of orthonormal rows") {
  mrc::Rng rng(2);
  ParameterStore<float> store;
  mrc::Similarity<float> sim(SimilarityKind::DotProduct, 3, store, "sim", rng);
  auto h = Tensor::from_data({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto s = sim(h, h);
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < 3; ++j) CHECK(s.at({0, t, j}) == doctest::Approx(t == j ? 1.0 : 0.0));
}

TEST_CASE("similarity: trilinear matches scalar expansion") {
  mrc::Rng rng(4);
  ParameterStore<float> store;
  mrc::Similarity<float> sim(SimilarityKind::TriLinear, 2, store, "sim", rng);
  std::vector<float> wh{0.5f, -1.0f}, wu{2.0f, 0.25f}, whu{1.5f, -0.5f};
  store.find("sim.w_h")->value() = wh;
  store.find("sim.w_u")->value() = wu;
  store.find("sim.w_hu")->value() = whu;

  auto h = Tensor::from_data({1, 2, 2}, {1, 2, -1, 0.5f});
  auto u = Tensor::from_data({1, 2, 2}, {0.5f, 1, 2, -2});
  auto s = sim(h, u);
  for (int t = 0; t < 2; ++t) {
    for (int j = 0; j < 2; ++j) {
      float hv0 = h.at({0, t, 0}), hv1 = h.at({0, t, 1});
      float uv0 = u.at({0, j, 0}), uv1 = u.at({0, j, 1});
      float want = wh[0] * hv0 + wh[1] * hv1 + wu[0] * uv0 + wu[1] * uv1 +
                   whu[0] * hv0 * uv0 + whu[1] * hv1 * uv1;
      CHECK(s.at({0, t, j}) == doctest::Approx(want));
    }
  }
}

TEST_CASE("similarity gradients vs finite differences") {
  mrc::Rng rng(6);
  for (auto kind : {SimilarityKind::TriLinear, SimilarityKind::Mlp, SimilarityKind::DotProduct}) {
    ParameterStore<double> store;
    mrc::Similarity<double> sim(kind, 3, store, "sim", rng);
    auto h = gradcheck::random_tensor({2, 2, 3}, rng);
    auto u = gradcheck::random_tensor({2, 3, 3}, rng);
    std::vector<DTensor> leaves{h, u};
    for (auto& [name, p] : store.items()) leaves.push_back(p);
    auto rep = gradcheck::check(leaves, [&] {
      auto s = sim(h, u);
      return sum(mul(s, s));
    });
    CHECK_MESSAGE(rep.max_rel_err < 1e-4, "kind ", static_cast<int>(kind), ": ", rep.where);
  }
}

TEST_CASE("bi_attention with a single question position") {
  mrc::Rng rng(8);
  int B = 1, T = 3, J = 1, d = 2;
  auto h = Tensor::uniform({B, T, d}, rng, -1, 1);
  auto u = Tensor::uniform({B, J, d}, rng, -1, 1);
  auto s = Tensor::uniform({B, T, J}, rng, -1, 1);
  auto cmask = Tensor::from_data({B, T}, {1, 1, 1});
  auto qmask = Tensor::from_data({B, J}, {1});
  auto g = bi_attention(s, h, u, cmask, qmask);
  CHECK(g.shape() == Shape{B, T, 4 * d});
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < d; ++k) CHECK(g.at({0, t, d + k}) == doctest::Approx(u.at({0, 0, k})));
}

TEST_CASE("bi_attention with uniform scores averages unmasked question rows") {
  int B = 1, T = 2, J = 3, d = 2;
  auto h = Tensor::full({B, T, d}, 1.0f);
  auto u = Tensor::from_data({B, J, d}, {1, 2, 3, 4, 100, 200});
  auto s = Tensor::zeros({B, T, J});
  auto cmask = Tensor::from_data({B, T}, {1, 1});
  auto qmask = Tensor::from_data({B, J}, {1, 1, 0});  // masked row excluded from the mean
  auto g = bi_attention(s, h, u, cmask, qmask);
  CHECK(g.at({0, 0, d + 0}) == doctest::Approx(2.0));
  CHECK(g.at({0, 0, d + 1}) == doctest::Approx(3.0));
}

TEST_CASE("bi_attention gradients vs finite differences") {
  mrc::Rng rng(10);
  int B = 2, T = 3, J = 2, d = 2;
  auto h = gradcheck::random_tensor({B, T, d}, rng);
  auto u = gradcheck::random_tensor({B, J, d}, rng);
  auto cmask = DTensor::from_data({B, T}, {1, 1, 0, 1, 1, 1});
  auto qmask = DTensor::from_data({B, J}, {1, 1, 1, 0});
  ParameterStore<double> store;
  mrc::Similarity<double> sim(SimilarityKind::TriLinear, d, store, "sim", rng);
  std::vector<DTensor> leaves{h, u};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto g = bi_attention(sim(h, u), h, u, cmask, qmask);
    return sum(mul(g, g));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("uni_attention single key returns that value") {
  mrc::Rng rng(12);
  ParameterStore<float> store;
  mrc::UniAttention<float> attn(SimilarityKind::DotProduct, 2, store, "attn", rng);
  auto query = Tensor::uniform({1, 2}, rng, -1, 1);
  auto keys = Tensor::uniform({1, 1, 2}, rng, -1, 1);
  auto values = Tensor::from_data({1, 1, 2}, {3.5f, -2.0f});
  auto mask = Tensor::from_data({1, 1}, {1});
  auto out = attn(query, keys, values, mask);
  CHECK(out.shape() == Shape{1, 2});
  CHECK(out.value()[0] == doctest::Approx(3.5));
  CHECK(out.value()[1] == doctest::Approx(-2.0));
}

TEST_CASE("uni_attention with equal scores is a masked mean") {
  ParameterStore<float> store;
  mrc::Rng rng(13);
  mrc::UniAttention<float> attn(SimilarityKind::DotProduct, 2, store, "attn", rng);
  auto query = Tensor::zeros({1, 2});  // zero query: all dot scores equal
  auto keys = Tensor::from_data({1, 3, 2}, {5, 5, 7, 7, 9, 9});
  auto values = Tensor::from_data({1, 3, 2}, {1, 2, 3, 4, 100, 200});
  auto mask = Tensor::from_data({1, 3}, {1, 1, 0});
  auto out = attn(query, keys, values, mask);
  CHECK(out.value()[0] == doctest::Approx(2.0));
  CHECK(out.value()[1] == doctest::Approx(3.0));
}

TEST_CASE("uni_attention with zeroed MLP scorer is uniform") {
  ParameterStore<float> store;
  mrc::Rng rng(14);
  mrc::UniAttention<float> attn(SimilarityKind::Mlp, 2, store, "attn", rng);
  for (auto& [name, p] : store.items())
    std::fill(p.value().begin(), p.value().end(), 0.0f);
  auto query = Tensor::uniform({1, 2}, rng, -1, 1);
  auto keys = Tensor::uniform({1, 4, 2}, rng, -1, 1);
  auto values = Tensor::from_data({1, 4, 2}, {0, 4, 1, 5, 2, 6, 3, 7});
  auto mask = Tensor::full({1, 4}, 1.0f);
  auto out = attn(query, keys, values, mask);
  CHECK(out.value()[0] == doctest::Approx(1.5));
  CHECK(out.value()[1] == doctest::Approx(5.5));
}

TEST_CASE("uni_attention gradients vs finite differences") {
  mrc::Rng rng(15);
  ParameterStore<double> store;
  mrc::UniAttention<double> attn(SimilarityKind::Mlp, 2, store, "attn", rng);
  auto query = gradcheck::random_tensor({2, 2}, rng);
  auto keys = gradcheck::random_tensor({2, 3, 2}, rng);
  auto values = gradcheck::random_tensor({2, 3, 2}, rng);
  auto mask = DTensor::from_data({2, 3}, {1, 1, 0, 1, 1, 1});
  std::vector<DTensor> leaves{query, keys, values};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto out = attn(query, keys, values, mask);
    return sum(mul(out, out));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("self_attention at T=1") {
  mrc::Rng rng(16);
  auto x = Tensor::from_data({1, 1, 2}, {3, -4});
  auto mask = Tensor::from_data({1, 1}, {1});

  ParameterStore<float> s1;
  mrc::SelfAttention<float> keep(SimilarityKind::DotProduct, 2, s1, "sa", rng, false);
  CHECK(keep(x, mask).value() == x.value());

  ParameterStore<float> s2;
  mrc::SelfAttention<float> excl(SimilarityKind::DotProduct, 2, s2, "sa", rng, true);
  CHECK(excl(x, mask).value() == std::vector<float>{0, 0});  // all-masked convention
}

TEST_CASE("self_attention equals a per-position loop oracle") {
  mrc::Rng rng(17);
  int B = 1, T = 4, d = 3;
  auto x = Tensor::uniform({B, T, d}, rng, -1, 1);
  std::vector<float> mv{1, 1, 1, 0};
  auto mask = Tensor::from_data({B, T}, mv);

  for (bool exclude : {false, true}) {
    ParameterStore<float> store;
    mrc::SelfAttention<float> attn(SimilarityKind::DotProduct, d, store, "sa", rng, exclude);
    auto out = attn(x, mask);
    for (int t = 0; t < T; ++t) {
      // oracle: softmax over allowed positions of dot scores
      std::vector<float> scores(T, 0);
      std::vector<bool> allowed(T);
      float max_allowed = -1e30f;
      for (int j = 0; j < T; ++j) {
        allowed[j] = mv[j] == 1.0f && !(exclude && j == t);
        for (int k = 0; k < d; ++k) scores[j] += x.at({0, t, k}) * x.at({0, j, k});
        if (allowed[j]) max_allowed = std::max(max_allowed, scores[j]);
      }
      float denom = 0;
      for (int j = 0; j < T; ++j)
        if (allowed[j]) denom += std::exp(scores[j] - max_allowed);
      for (int k = 0; k < d; ++k) {
        float want = 0;
        for (int j = 0; j < T; ++j)
          if (allowed[j]) want += std::exp(scores[j] - max_allowed) / denom * x.at({0, j, k});
        CHECK(std::abs(out.at({0, t, k}) - want) < 1e-6f);
      }
    }
  }
}

TEST_CASE("bilstm zero input and zero parameters give zero outputs") {
  mrc::Rng rng(18);
  ParameterStore<float> store;
  mrc::BiLstm<float> lstm(2, 3, store, "lstm", rng);
  for (auto& [name, p] : store.items())
    std::fill(p.value().begin(), p.value().end(), 0.0f);
  auto x = Tensor::zeros({2, 4, 2});
  auto mask = Tensor::full({2, 4}, 1.0f);
  auto out = lstm(x, mask);
  for (float v : out.outputs.value()) CHECK(v == 0.0f);
}

TEST_CASE("bilstm and bigru shape contract") {
  mrc::Rng rng(19);
  ParameterStore<float> store;
  mrc::BiLstm<float> lstm(4, 5, store, "lstm", rng);
  mrc::BiGru<float> gru(4, 5, store, "gru", rng);
  auto x = Tensor::uniform({2, 3, 4}, rng, -1, 1);
  auto mask = Tensor::full({2, 3}, 1.0f);
  CHECK(lstm(x, mask).outputs.shape() == Shape{2, 3, 10});
  CHECK(gru(x, mask).outputs.shape() == Shape{2, 3, 10});
  CHECK(lstm(x, mask).last_forward.shape() == Shape{2, 5});
}

TEST_CASE("bilstm gradients vs finite differences") {
  mrc::Rng rng(20);
  ParameterStore<double> store;
  mrc::BiLstm<double> lstm(2, 2, store, "lstm", rng);
  auto x = gradcheck::random_tensor({1, 3, 2}, rng);
  auto mask = DTensor::from_data({1, 3}, {1, 1, 1});
  std::vector<DTensor> leaves{x};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto out = lstm(x, mask);
    return sum(mul(out.outputs, out.outputs));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("bigru gradients vs finite differences") {
  mrc::Rng rng(21);
  ParameterStore<double> store;
  mrc::BiGru<double> gru(2, 2, store, "gru", rng);
  auto x = gradcheck::random_tensor({1, 3, 2}, rng);
  auto mask = DTensor::from_data({1, 3}, {1, 1, 1});
  std::vector<DTensor> leaves{x};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto out = gru(x, mask);
    return sum(mul(out.outputs, out.outputs));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("recurrent padding invariance is exact at real steps") {
  mrc::Rng rng(22);
  ParameterStore<float> store;
  mrc::BiLstm<float> lstm(3, 4, store, "lstm", rng);
  mrc::BiGru<float> gru(3, 4, store, "gru", rng);

  auto x = Tensor::uniform({2, 3, 3}, rng, -1, 1);
  auto mask = Tensor::from_data({2, 3}, {1, 1, 0, 1, 1, 1});

  // re-pad to T=5 with garbage values at padded steps
  std::vector<float> xv(2 * 5 * 3, 9.0f);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 3; ++t)
      for (int k = 0; k < 3; ++k) xv[(b * 5 + t) * 3 + k] = x.at({b, t, k});
  auto x_wide = Tensor::from_data({2, 5, 3}, xv);
  std::vector<float> mv(2 * 5, 0.0f);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 3; ++t) mv[b * 5 + t] = mask.at({b, t});
  auto mask_wide = Tensor::from_data({2, 5}, mv);

  auto check_layer = [&](auto& layer) {
    auto narrow = layer(x, mask).outputs;
    auto wide = layer(x_wide, mask_wide).outputs;
    for (int b = 0; b < 2; ++b)
      for (int t = 0; t < 3; ++t)
        for (int k = 0; k < 8; ++k)
          CHECK(std::abs(narrow.at({b, t, k}) - wide.at({b, t, k})) < 1e-5f);
  };
  check_layer(lstm);
  check_layer(gru);
}

TEST_CASE("zero-length sequence yields zero outputs") {
  mrc::Rng rng(23);
  ParameterStore<float> store;
  mrc::BiLstm<float> lstm(2, 3, store, "lstm", rng);
  auto x = Tensor::uniform({1, 3, 2}, rng, -1, 1);
  auto mask = Tensor::zeros({1, 3});
  auto out = lstm(x, mask);
  for (float v : out.outputs.value()) CHECK(v == 0.0f);
  for (float v : out.last_forward.value()) CHECK(v == 0.0f);
}

TEST_CASE("highway with saturated gate bias is the identity") {
  mrc::Rng rng(24);
  ParameterStore<float> store;
  mrc::Highway<float> hw(3, 1, store, "hw", rng);
  auto bg = hw.gate_bias(0);
  std::fill(bg.value().begin(), bg.value().end(), -20.0f);
  auto x = Tensor::uniform({2, 3}, rng, -1, 1);
  auto y = hw(x);
  CHECK(y.shape() == x.shape());
  for (size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y.value()[i] - x.value()[i]) < 1e-6f);
}

TEST_CASE("highway preserves shape and passes gradient checks") {
  mrc::Rng rng(25);
  ParameterStore<double> store;
  mrc::Highway<double> hw(2, 2, store, "hw", rng);
  auto x = gradcheck::random_tensor({2, 3, 2}, rng);
  CHECK(hw(x).shape() == Shape{2, 3, 2});
  std::vector<DTensor> leaves{x};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto y = hw(x);
    return sum(mul(y, y));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("variational dropout") {
  mrc::Rng rng(26);
  auto x = Tensor::uniform({2, 3, 4}, rng, 0.5, 1.5);

  SUBCASE("rate zero is the identity") {
    mrc::VariationalDropout<float> drop(0.0);
    CHECK(drop(x, true, rng).value() == x.value());
  }
  SUBCASE("eval mode is the identity") {
    mrc::VariationalDropout<float> drop(0.5);
    CHECK(drop(x, false, rng).value() == x.value());
  }
  SUBCASE("kept features scale identically across timesteps") {
    mrc::VariationalDropout<float> drop(0.5);
    auto y = drop(x, true, rng);
    for (int b = 0; b < 2; ++b) {
      for (int k = 0; k < 4; ++k) {
        float r0 = y.at({b, 0, k}) / x.at({b, 0, k});
        for (int t = 1; t < 3; ++t)
          CHECK(y.at({b, t, k}) / x.at({b, t, k}) == doctest::Approx(r0));
        CHECK((std::abs(r0 - 2.0f) < 1e-6f || std::abs(r0) < 1e-6f));
      }
    }
  }
  SUBCASE("invalid rate rejected") {
    CHECK_THROWS_AS(mrc::VariationalDropout<float>(1.0), mrc::ConfigError);
  }
}

TEST_CASE("reduce_sequence at T=1 returns the single row for every kind") {
  mrc::Rng rng(27);
  auto x = Tensor::from_data({1, 1, 3}, {4, -5, 6});
  auto mask = Tensor::from_data({1, 1}, {1});
  ParameterStore<float> store;
  mrc::ReduceSequence<float> rmax(mrc::ReduceKind::Max);
  mrc::ReduceSequence<float> rmean(mrc::ReduceKind::Mean);
  mrc::ReduceSequence<float> rsum(mrc::ReduceKind::WeightedSum, 3, store, "rs", rng);
  CHECK(rmax(x, mask).value() == x.value());
  CHECK(rmean(x, mask).value() == x.value());
  auto w = rsum(x, mask);
  for (int k = 0; k < 3; ++k) CHECK(w.value()[k] == doctest::Approx(x.value()[k]));
}

TEST_CASE("reduce_sequence mean with half-masked batch") {
  auto x = Tensor::from_data({1, 4, 2}, {1, 2, 3, 4, 100, 100, 100, 100});
  auto mask = Tensor::from_data({1, 4}, {1, 1, 0, 0});
  mrc::ReduceSequence<float> rmean(mrc::ReduceKind::Mean);
  auto y = rmean(x, mask);
  CHECK(y.value()[0] == doctest::Approx(2.0));
  CHECK(y.value()[1] == doctest::Approx(3.0));
}

TEST_CASE("reduce_sequence max ignores masked negative padding") {
  auto x = Tensor::from_data({1, 3, 2}, {-3, -4, -1, -2, 50, 60});
  auto mask = Tensor::from_data({1, 3}, {1, 1, 0});
  mrc::ReduceSequence<float> rmax(mrc::ReduceKind::Max);
  auto y = rmax(x, mask);
  CHECK(y.value()[0] == doctest::Approx(-1.0));
  CHECK(y.value()[1] == doctest::Approx(-2.0));
}

TEST_CASE("reduce_sequence weighted_sum gradient check") {
  mrc::Rng rng(28);
  ParameterStore<double> store;
  mrc::ReduceSequence<double> rs(mrc::ReduceKind::WeightedSum, 3, store, "rs", rng);
  auto x = gradcheck::random_tensor({2, 3, 3}, rng);
  auto mask = DTensor::from_data({2, 3}, {1, 1, 0, 1, 1, 1});
  std::vector<DTensor> leaves{x};
  for (auto& [name, p] : store.items()) leaves.push_back(p);
  auto rep = gradcheck::check(leaves, [&] {
    auto y = rs(x, mask);
    return sum(mul(y, y));
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("embedding layer conventions") {
  mrc::Rng rng(29);

  SUBCASE("PAD id maps to the zero vector") {
    ParameterStore<float> store;
    mrc::Embedding<float> emb(5, 3, 5, store, "emb", rng);
    auto out = emb({mrc::kPadIndex, 2}, {2});
    for (int k = 0; k < 3; ++k) CHECK(out.at({0, k}) == 0.0f);
  }

  SUBCASE("k=0 freezes the matrix") {
    ParameterStore<float> store;
    mrc::Embedding<float> emb(5, 3, 0, store, "emb", rng);
    CHECK_FALSE(emb.matrix().requires_grad());
    auto out = emb({2, 3}, {2});
    auto loss = sum(out);
    mrc::backward(loss);
    CHECK(!emb.matrix().has_grad());
  }

  SUBCASE("k=V trains all used rows") {
    ParameterStore<float> store;
    mrc::Embedding<float> emb(4, 2, 4, store, "emb", rng);
    auto out = emb({1, 2, 3}, {3});
    mrc::backward(sum(out));
    const auto& g = emb.matrix().grad();
    CHECK(g[0 * 2] == 0.0f);  // PAD row pinned
    for (int r = 1; r < 4; ++r) CHECK(g[r * 2] == 1.0f);
  }

  SUBCASE("pretrained rows are copied") {
    mrc::EmbeddingMatrix m;
    m.rows = 3;
    m.dim = 2;
    m.data = {0, 0, 0.5f, -0.5f, 1.5f, 2.5f};
    ParameterStore<float> store;
    mrc::Embedding<float> emb(m, 0, store, "emb");
    auto out = emb({2}, {1});
    CHECK(out.value() == std::vector<float>{1.5f, 2.5f});
  }
}

TEST_CASE("embedding gradient flow vs finite differences") {
  mrc::Rng rng(30);
  ParameterStore<double> store;
  mrc::Embedding<double> emb(5, 2, 5, store, "emb", rng);
  std::vector<int> ids{1, 2, 4, 2};
  std::vector<DTensor> leaves{emb.matrix()};
  auto rep = gradcheck::check(leaves, [&] {
    auto out = emb(ids, {2, 2});
    return sum(mul(out, out));
  });
  // PAD row gets no analytic gradient and no numeric one (never looked up)
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.where);
}

TEST_CASE("attention layers are padding invariant in eval mode") {
  mrc::Rng rng(31);
  int B = 1, T = 3, d = 2;
  auto x = Tensor::uniform({B, T, d}, rng, -1, 1);
  auto mask = Tensor::from_data({B, T}, {1, 1, 0});

  std::vector<float> xv(static_cast<size_t>(B) * (T + 2) * d, 7.0f);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < d; ++k) xv[t * d + k] = x.at({0, t, k});
  auto x_wide = Tensor::from_data({B, T + 2, d}, xv);
  auto mask_wide = Tensor::from_data({B, T + 2}, {1, 1, 0, 0, 0});

  ParameterStore<float> store;
  mrc::SelfAttention<float> attn(SimilarityKind::TriLinear, d, store, "sa", rng);
  auto narrow = attn(x, mask);
  auto wide = attn(x_wide, mask_wide);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < d; ++k)
      CHECK(std::abs(narrow.at({0, t, k}) - wide.at({0, t, k})) < 1e-5f);
}
