#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "snr/grad_check.hpp"
#include "snr/snr_block.hpp"
#include "oracle_helpers.hpp"

using namespace snr;

namespace {

template <typename S>
SnrParams<S> make_block(int channels, int reduction, SnrVariant variant, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return SnrParams<S>::make("snr", channels, reduction, variant, rng);
}

Tensor4<double> random_map(Index n, Index c, Index h, Index w, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  Tensor4<double> t(n, c, h, w);
  oracle::fill_random(t, rng, stddev);
  return t;
}

}  // namespace

TEST_CASE("hidden width follows max(1, c/r)") {
  CHECK(make_block<double>(32, 16, SnrVariant::gated, 1).hidden_width() == 2);
  CHECK(make_block<double>(128, 16, SnrVariant::gated, 1).hidden_width() == 8);
  // degenerate: c < r clamps to one hidden unit
  CHECK(make_block<double>(8, 16, SnrVariant::gated, 1).hidden_width() == 1);
  CHECK(make_block<double>(2, 1, SnrVariant::gated, 1).hidden_width() == 2);
}

TEST_CASE("channel_gate: zero weights give 0.5 everywhere") {
  auto params = make_block<double>(6, 2, SnrVariant::gated, 3);
  params.gate_reduce.value.setZero();
  params.gate_expand.value.setZero();
  Graph<double> g;
  Var<double> r = g.input(random_map(2, 6, 3, 3, 11));
  Var<double> a = channel_gate(r, params);
  for (Index i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("channel_gate: hand-evaluated two-channel case") {
  // c=2, r=1, identity weights; pooled residual (1, -1): ReLU zeroes the
  // second unit, so a = (sigmoid(1), sigmoid(0)).
  auto params = make_block<double>(2, 1, SnrVariant::gated, 5);
  params.gate_reduce.value << 1, 0, 0, 1;
  params.gate_expand.value << 1, 0, 0, 1;
  Tensor4<double> r(1, 2, 1, 1);
  r(0, 0, 0, 0) = 1;
  r(0, 1, 0, 0) = -1;
  Graph<double> g;
  Var<double> a = channel_gate(g.input(r), params);
  CHECK(a.value()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(a.value()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("disentangle: halves, zeros and the loop oracle") {
  Graph<double> g;
  Tensor4<double> r = random_map(2, 4, 3, 3, 13);
  Var<double> rv = g.input(r);

  ArrayX<double> half = ArrayX<double>::Constant(8, 0.5);
  auto [kept_h, dropped_h] = disentangle(rv, g.input(Shape::matrix(2, 4), half));
  for (Index i = 0; i < r.count(); ++i) {
    CHECK(kept_h.value()[i] == doctest::Approx(r.data[i] / 2).epsilon(1e-12));
    CHECK(dropped_h.value()[i] == doctest::Approx(r.data[i] / 2).epsilon(1e-12));
  }

  Tensor4<double> zero(2, 4, 3, 3);
  std::mt19937_64 grng(17);
  std::uniform_real_distribution<double> ug(0.05, 0.95);
  ArrayX<double> gate(8);
  for (Index i = 0; i < 8; ++i) gate[i] = ug(grng);
  auto [kept_z, dropped_z] = disentangle(g.input(zero), g.input(Shape::matrix(2, 4), gate));
  for (Index i = 0; i < zero.count(); ++i) {
    CHECK(kept_z.value()[i] == 0.0);
    CHECK(dropped_z.value()[i] == 0.0);
  }

  auto [kept, dropped] = disentangle(rv, g.input(Shape::matrix(2, 4), gate));
  for (Index i = 0; i < 2; ++i)
    for (Index k = 0; k < 4; ++k)
      for (Index j = 0; j < 9; ++j) {
        const double expect = gate[i * 4 + k] * r.data[(i * 4 + k) * 9 + j];
        CHECK(std::abs(kept.value()[(i * 4 + k) * 9 + j] - expect) < 1e-12);
        CHECK(std::abs(kept.value()[(i * 4 + k) * 9 + j] + dropped.value()[(i * 4 + k) * 9 + j] -
                       r.data[(i * 4 + k) * 9 + j]) < 1e-12);
      }
}

TEST_CASE("snr_forward: trace identities on randomized inputs") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto params = make_block<double>(8, 4, SnrVariant::gated, seed);
    Graph<double> g;
    Tensor4<double> f = random_map(2, 8, 4, 4, seed * 31, 1.5);
    SnrTrace<double> t = snr_forward(g.input(f), params, true);

    REQUIRE(t.has_contaminated);
    const Index count = f.count();
    for (Index i = 0; i < count; ++i) {
      // complementarity and restitution identities
      CHECK(std::abs(t.relevant_residual.value()[i] + t.irrelevant_residual.value()[i] - t.residual.value()[i]) <
            1e-6);
      CHECK(std::abs(t.restituted.value()[i] - t.normalized.value()[i] - t.relevant_residual.value()[i]) < 1e-6);
      CHECK(std::abs(t.contaminated.value()[i] - t.normalized.value()[i] - t.irrelevant_residual.value()[i]) < 1e-6);
      // residual definition
      CHECK(std::abs(t.residual.value()[i] - (f.data[i] - t.normalized.value()[i])) < 1e-12);
    }
    for (Index i = 0; i < t.gate.value().size(); ++i) {
      CHECK(t.gate.value()[i] > 0.0);
      CHECK(t.gate.value()[i] < 1.0);
    }
    // output shape equals input shape
    CHECK(t.restituted.shape() == f.shape());
  }
}

TEST_CASE("snr_forward: staged re-evaluation oracle") {
  auto params = make_block<double>(8, 16, SnrVariant::gated, 23);
  Graph<double> g;
  Tensor4<double> f = random_map(2, 8, 4, 4, 29);
  SnrTrace<double> t = snr_forward(g.input(f), params, true);

  // Re-evaluate the whole module with plain loops.
  auto normalized = oracle::instance_norm(f, oracle::to_doubles(params.gamma.value),
                                          oracle::to_doubles(params.beta.value), 1e-5);
  Tensor4<double> residual(2, 8, 4, 4);
  for (Index i = 0; i < f.count(); ++i) residual.data[i] = f.data[i] - normalized.data[i];
  std::vector<double> pooled = oracle::global_avg_pool(residual);
  const Index hidden = params.hidden_width();
  for (Index s = 0; s < 2; ++s) {
    std::vector<double> hid(static_cast<std::size_t>(hidden), 0.0);
    for (Index hh = 0; hh < hidden; ++hh) {
      double acc = 0;
      for (Index c = 0; c < 8; ++c) acc += params.gate_reduce.value[hh * 8 + c] * pooled[static_cast<std::size_t>(s * 8 + c)];
      hid[static_cast<std::size_t>(hh)] = std::max(0.0, acc);
    }
    for (Index c = 0; c < 8; ++c) {
      double acc = 0;
      for (Index hh = 0; hh < hidden; ++hh) acc += params.gate_expand.value[c * hidden + hh] * hid[static_cast<std::size_t>(hh)];
      const double a = 1.0 / (1.0 + std::exp(-acc));
      CHECK(std::abs(t.gate.value()[s * 8 + c] - a) < 1e-9);
      for (Index j = 0; j < 16; ++j) {
        const Index e = (s * 8 + c) * 16 + j;
        const double rp = a * residual.data[e];
        CHECK(std::abs(t.relevant_residual.value()[e] - rp) < 1e-6);
        CHECK(std::abs(t.restituted.value()[e] - (normalized.data[e] + rp)) < 1e-6);
      }
    }
  }
}

TEST_CASE("snr_forward: normalized input is a fixed point") {
  auto params = make_block<double>(4, 16, SnrVariant::gated, 41);
  params.gamma.value.setConstant(1.0);
  params.beta.value.setConstant(0.2);
  // Build an input that already satisfies F = IN(F) under gamma/beta by
  // normalizing a random map once.
  Graph<double> pre;
  Tensor4<double> raw = random_map(2, 4, 5, 5, 43);
  Parameter<double> g0 = params.gamma, b0 = params.beta;
  Var<double> fixed = instance_norm(pre.input(raw), pre.leaf(g0), pre.leaf(b0), 1e-5);
  Tensor4<double> f(2, 4, 5, 5);
  f.data = fixed.value();

  Graph<double> g;
  SnrTrace<double> t = snr_forward(g.input(f), params, true);
  for (Index i = 0; i < f.count(); ++i) {
    CHECK(std::abs(t.residual.value()[i]) < 1e-4);
    CHECK(std::abs(t.restituted.value()[i] - f.data[i]) < 1e-4);
    CHECK(std::abs(t.contaminated.value()[i] - f.data[i]) < 1e-4);
    CHECK(std::abs(t.normalized.value()[i] - f.data[i]) < 1e-4);
  }
}

TEST_CASE("snr_forward: inference skips the contaminated branch") {
  auto params = make_block<double>(8, 16, SnrVariant::gated, 47);
  Graph<double> g;
  Tensor4<double> f = random_map(1, 8, 3, 3, 53);
  SnrTrace<double> t = snr_forward(g.input(f), params, false);
  CHECK_FALSE(t.has_contaminated);
  CHECK_FALSE(t.irrelevant_residual.valid());
  CHECK_FALSE(t.contaminated.valid());
  CHECK(t.restituted.valid());

  // training and inference agree on the module output
  Graph<double> g2;
  SnrTrace<double> t2 = snr_forward(g2.input(f), params, true);
  for (Index i = 0; i < f.count(); ++i) CHECK(t.restituted.value()[i] == t2.restituted.value()[i]);
}

TEST_CASE("style invariance of the normalized branch") {
  auto params = make_block<double>(4, 16, SnrVariant::gated, 59);
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> ua(0.6, 1.6), ub(-1.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor4<double> f = random_map(2, 4, 4, 4, 1000 + static_cast<std::uint64_t>(trial), 2.0);
    Tensor4<double> styled = f;
    for (Index i = 0; i < 2; ++i)
      for (Index k = 0; k < 4; ++k) {
        const double a = ua(rng), b = ub(rng);
        for (Index j = 0; j < 16; ++j) styled.data[(i * 4 + k) * 16 + j] = a * f.data[(i * 4 + k) * 16 + j] + b;
      }
    Graph<double> g;
    SnrTrace<double> t1 = snr_forward(g.input(f), params, false);
    SnrTrace<double> t2 = snr_forward(g.input(styled), params, false);
    for (Index i = 0; i < f.count(); ++i)
      CHECK(std::abs(t1.normalized.value()[i] - t2.normalized.value()[i]) < 1e-5);
  }
}

TEST_CASE("variant forward: conv") {
  auto params = make_block<double>(6, 16, SnrVariant::conv, 67);

  SUBCASE("zero kernels collapse restitution") {
    params.conv_keep.value.setZero();
    params.conv_drop.value.setZero();
    Graph<double> g;
    Tensor4<double> f = random_map(2, 6, 3, 3, 71);
    SnrTrace<double> t = snr_variant_forward(g.input(f), SnrVariant::conv, params, true);
    for (Index i = 0; i < f.count(); ++i) {
      CHECK(t.relevant_residual.value()[i] == 0.0);
      CHECK(t.irrelevant_residual.value()[i] == 0.0);
      CHECK(t.restituted.value()[i] == t.normalized.value()[i]);
      CHECK(t.contaminated.value()[i] == t.normalized.value()[i]);
    }
    CHECK_FALSE(t.gate.valid());
  }

  SUBCASE("matches a direct 1x1-conv + relu oracle") {
    Graph<double> g;
    Tensor4<double> f = random_map(2, 6, 3, 3, 73);
    SnrTrace<double> t = snr_variant_forward(g.input(f), SnrVariant::conv, params, true);
    Tensor4<double> residual(2, 6, 3, 3);
    for (Index i = 0; i < f.count(); ++i) residual.data[i] = t.residual.value()[i];
    Tensor4<double> wk(6, 6, 1, 1), wd(6, 6, 1, 1);
    wk.data = params.conv_keep.value;
    wd.data = params.conv_drop.value;
    Tensor4<double> keep = oracle::conv2d(residual, wk, 1, 0);
    Tensor4<double> drop = oracle::conv2d(residual, wd, 1, 0);
    for (Index i = 0; i < f.count(); ++i) {
      CHECK(std::abs(t.relevant_residual.value()[i] - std::max(0.0, keep.data[i])) < 1e-6);
      CHECK(std::abs(t.irrelevant_residual.value()[i] - std::max(0.0, drop.data[i])) < 1e-6);
    }
  }
}

TEST_CASE("variant forward: dual gate") {
  auto params = make_block<double>(6, 2, SnrVariant::dual_gate, 79);

  SUBCASE("zero gate stacks give R/2 on both sides") {
    params.gate_reduce.value.setZero();
    params.gate_expand.value.setZero();
    params.gate_reduce_b.value.setZero();
    params.gate_expand_b.value.setZero();
    Graph<double> g;
    Tensor4<double> f = random_map(2, 6, 3, 3, 83);
    SnrTrace<double> t = snr_variant_forward(g.input(f), SnrVariant::dual_gate, params, true);
    for (Index i = 0; i < f.count(); ++i) {
      CHECK(t.relevant_residual.value()[i] == doctest::Approx(t.residual.value()[i] / 2).epsilon(1e-12));
      CHECK(t.irrelevant_residual.value()[i] == doctest::Approx(t.residual.value()[i] / 2).epsilon(1e-12));
    }
  }

  SUBCASE("unshared gates need not be complementary") {
    Graph<double> g;
    Tensor4<double> f = random_map(2, 6, 3, 3, 89);
    SnrTrace<double> t = snr_variant_forward(g.input(f), SnrVariant::dual_gate, params, true);
    double max_violation = 0;
    for (Index i = 0; i < f.count(); ++i)
      max_violation = std::max(max_violation, std::abs(t.relevant_residual.value()[i] +
                                                       t.irrelevant_residual.value()[i] - t.residual.value()[i]));
    CHECK(max_violation > 1e-6);  // sum identity intentionally not enforced
  }

  CHECK_THROWS(snr_variant_forward(Var<double>(), SnrVariant::gated, params, true));
}

TEST_CASE("force_gate_zero reduces the module to bare instance norm") {
  auto params = make_block<double>(4, 16, SnrVariant::gated, 97);
  params.force_gate_zero = true;
  Graph<double> g;
  Tensor4<double> f = random_map(2, 4, 4, 4, 101);
  SnrTrace<double> t = snr_forward(g.input(f), params, true);
  for (Index i = 0; i < f.count(); ++i) {
    CHECK(t.relevant_residual.value()[i] == 0.0);
    CHECK(t.restituted.value()[i] == t.normalized.value()[i]);
  }
}

TEST_CASE("scalar reductions of trace fields pass grad_check") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    std::mt19937_64 rng(seed);
    auto params = SnrParams<double>::make("snr", 6, 3, SnrVariant::gated, rng);
    Parameter<double> input("input", Shape::tensor4(2, 6, 3, 3));
    std::normal_distribution<double> nd(0, 1);
    for (Index i = 0; i < input.count(); ++i) input.value[i] = nd(rng);
    std::vector<Parameter<double>*> checked = {&input, &params.gamma, &params.beta, &params.gate_reduce,
                                               &params.gate_expand};
    auto rep = grad_check(checked, [&](Graph<double>& g) {
      SnrTrace<double> t = snr_forward(g.leaf(input), params, true);
      Var<double> s1 = mean(mul(t.restituted, t.restituted));
      Var<double> s2 = mean(mul(t.contaminated, t.contaminated));
      Var<double> s3 = mean(mul(t.pooled_restituted, t.pooled_restituted));
      return add(add(s1, s2), s3);
    });
    CHECK_MESSAGE(rep.max_err < 1e-4, "seed ", seed, " err ", rep.max_err, " at ", rep.worst_param);
  }
}

TEST_CASE("variant parsing") {
  CHECK(parse_snr_variant("gated") == SnrVariant::gated);
  CHECK(parse_snr_variant("conv") == SnrVariant::conv);
  CHECK(parse_snr_variant("dual_gate") == SnrVariant::dual_gate);
  CHECK_THROWS(parse_snr_variant("bogus"));
}
