#include "elgan/ops.hpp"
#include "elgan/rng.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace elgan;

namespace {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

template <typename Scalar>
Parameter<Scalar> make_param(const std::string& name, const Shape& s, Rng& rng) {
  return {name, random_tensor<Scalar>(s, rng), Tensor<Scalar>(s), true};
}

// Scalar head sum(out * r) so any op can be differentiated through Graph::backward.
template <typename Scalar>
Var project(Graph<Scalar>& g, Var out, const Tensor<Scalar>& r) {
  Tensor<Scalar> v(Shape{1, 1, 1, 1});
  v.data()[0] = (g.value(out).array() * r.array()).sum();
  return g.emit(std::move(v), true, [out, r](Graph<Scalar>& g, Var self) {
    g.grad(out).array() += g.grad(self).data()[0] * r.array();
  });
}

std::vector<double> to_vec(const Tensor<float>& t) { return {t.data(), t.data() + t.size()}; }

struct ConvCase {
  Index n, cin, h, w, cout, k;
};

}  // namespace

TEST(Conv2d, ForwardMatchesDirectLoops) {
  Rng rng(7);
  for (const ConvCase& c : {ConvCase{1, 3, 5, 7, 4, 3}, ConvCase{2, 5, 19, 33, 11, 3}, ConvCase{2, 16, 16, 16, 8, 3},
                            ConvCase{3, 7, 9, 17, 9, 1}, ConvCase{1, 40, 32, 32, 40, 1}, ConvCase{1, 2, 1, 1, 3, 3}}) {
    Tensor<float> x = random_tensor<float>(Shape{c.n, c.cin, c.h, c.w}, rng);
    auto w = make_param<float>("w", Shape{c.cout, c.cin, c.k, c.k}, rng);
    auto b = make_param<float>("b", Shape{1, 1, 1, c.cout}, rng);
    Graph<float> g;
    const Var out = ops::conv2d(g, g.input(x), w, b, false);
    const auto want = oracle::conv2d(to_vec(x), int(c.n), int(c.cin), int(c.h), int(c.w), to_vec(w.value),
                                     to_vec(b.value), int(c.cout), int(c.k));
    const auto& got = g.value(out);
    ASSERT_EQ(got.size(), static_cast<Index>(want.size()));
    for (Index i = 0; i < got.size(); ++i) ASSERT_NEAR(got.data()[i], want[static_cast<std::size_t>(i)], 2e-5) << i;
  }
}

TEST(Conv2d, GradientsMatchCentralDifferences) {
  Rng rng(11);
  for (const ConvCase& c : {ConvCase{2, 3, 6, 5, 4, 3}, ConvCase{1, 9, 7, 18, 10, 3}, ConvCase{2, 5, 4, 6, 3, 1}}) {
    Tensor<double> x = random_tensor<double>(Shape{c.n, c.cin, c.h, c.w}, rng);
    auto w = make_param<double>("w", Shape{c.cout, c.cin, c.k, c.k}, rng);
    auto b = make_param<double>("b", Shape{1, 1, 1, c.cout}, rng);
    const Tensor<double> r = random_tensor<double>(Shape{c.n, c.cout, c.h, c.w}, rng);

    Graph<double> g;
    const Var xin = g.input(x, true);
    const Var loss = project(g, ops::conv2d(g, xin, w, b, true), r);
    g.backward(loss);

    std::vector<double*> coords;
    std::vector<double> analytic;
    for (Index i = 0; i < x.size(); i += 3) {
      coords.push_back(x.data() + i);
      analytic.push_back(g.grad(xin).data()[i]);
    }
    for (Index i = 0; i < w.value.size(); i += 2) {
      coords.push_back(w.value.data() + i);
      analytic.push_back(w.grad.data()[i]);
    }
    for (Index i = 0; i < b.value.size(); ++i) {
      coords.push_back(b.value.data() + i);
      analytic.push_back(b.grad.data()[i]);
    }
    auto f = [&] {
      Graph<double> h;
      return h.scalar(project(h, ops::conv2d(h, h.input(x), w, b, false), r));
    };
    const auto check = oracle::central_difference(coords, analytic, f);
    EXPECT_LT(check.max_rel, 1e-6);
  }
}

TEST(Conv2d, UntrackedLeavesParameterGradientsAlone) {
  Rng rng(3);
  Tensor<float> x = random_tensor<float>(Shape{1, 2, 4, 4}, rng);
  auto w = make_param<float>("w", Shape{3, 2, 3, 3}, rng);
  auto b = make_param<float>("b", Shape{1, 1, 1, 3}, rng);
  Graph<float> g;
  const Var xin = g.input(x, true);
  g.backward(project(g, ops::conv2d(g, xin, w, b, false), Tensor<float>(Shape{1, 3, 4, 4}, 1.0f)));
  EXPECT_TRUE((w.grad.array() == 0.0f).all());
  EXPECT_TRUE((b.grad.array() == 0.0f).all());
  EXPECT_GT(g.grad(xin).array().abs().sum(), 0.0f);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Rng rng(1);
  auto w = make_param<float>("w", Shape{3, 2, 3, 3}, rng);
  auto b = make_param<float>("b", Shape{1, 1, 1, 3}, rng);
  Graph<float> g;
  EXPECT_THROW(ops::conv2d(g, g.input(Tensor<float>(Shape{1, 3, 4, 4})), w, b, false), ShapeError);
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(5);
  const Shape s{2, 3, 4, 6};
  using Op = std::function<Var(Graph<double>&, Var)>;
  const std::vector<std::pair<std::string, Op>> cases = {
      {"relu", [](Graph<double>& g, Var v) { return ops::relu(g, v); }},
      {"elu", [](Graph<double>& g, Var v) { return ops::elu(g, v); }},
      {"sigmoid", [](Graph<double>& g, Var v) { return ops::sigmoid(g, v); }},
      {"softmax", [](Graph<double>& g, Var v) { return ops::softmax_channels(g, v); }},
      {"avg_pool2", [](Graph<double>& g, Var v) { return ops::avg_pool2(g, v); }},
      {"upsample2", [](Graph<double>& g, Var v) { return ops::upsample2(g, v); }},
      {"concat", [](Graph<double>& g, Var v) { return ops::concat(g, {v, ops::scale(g, v, 2.0), v}); }},
      {"dropout", [](Graph<double>& g, Var v) { return ops::dropout(g, v, 0.3, 99); }},
      {"scale", [](Graph<double>& g, Var v) { return ops::scale(g, v, -1.5); }},
  };
  for (const auto& [name, op] : cases) {
    Tensor<double> x = random_tensor<double>(s, rng);
    // keep relu away from its kink
    for (Index i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i]) < 1e-3) x.data()[i] = 0.5;
    Graph<double> probe;
    const Shape out_shape = probe.value(op(probe, probe.input(x))).shape();
    const Tensor<double> r = random_tensor<double>(out_shape, rng);

    Graph<double> g;
    const Var xin = g.input(x, true);
    g.backward(project(g, op(g, xin), r));
    std::vector<double*> coords;
    std::vector<double> analytic;
    for (Index i = 0; i < x.size(); ++i) {
      coords.push_back(x.data() + i);
      analytic.push_back(g.grad(xin).data()[i]);
    }
    auto f = [&] {
      Graph<double> h;
      return h.scalar(project(h, op(h, h.input(x)), r));
    };
    EXPECT_LT(oracle::central_difference(coords, analytic, f).max_rel, 1e-6) << name;
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(8);
  Graph<float> g;
  const auto& p = g.value(ops::softmax_channels(g, g.input(random_tensor<float>(Shape{2, 4, 5, 5}, rng, -20, 20))));
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 25; ++i) {
      double sum = 0.0;
      for (Index c = 0; c < 4; ++c) sum += p.plane_ptr(n, c)[i];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Ops, PoolAndUpsampleShapes) {
  Graph<float> g;
  const Var x = g.input(Tensor<float>(Shape{1, 2, 8, 6}, 1.0f));
  EXPECT_EQ(g.value(ops::avg_pool2(g, x)).shape(), (Shape{1, 2, 4, 3}));
  EXPECT_EQ(g.value(ops::upsample2(g, x)).shape(), (Shape{1, 2, 16, 12}));
}

TEST(Dropout, MaskIsSeededAndRateIsRespected) {
  const Tensor<float> x(Shape{1, 4, 64, 64}, 1.0f);
  Graph<float> g;
  const Tensor<float> a = g.value(ops::dropout(g, g.input(x), 0.25, 17));
  const Tensor<float> b = g.value(ops::dropout(g, g.input(x), 0.25, 17));
  const Tensor<float> c = g.value(ops::dropout(g, g.input(x), 0.25, 18));
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  const double dropped = static_cast<double>((a.array() == 0.0f).count()) / static_cast<double>(a.size());
  EXPECT_NEAR(dropped, 0.25, 0.02);
  // inverted scaling keeps the expectation
  EXPECT_NEAR(a.array().mean(), 1.0, 0.03);
}

TEST(Dropout, ZeroRateIsIdentity) {
  Rng rng(2);
  const Tensor<float> x = random_tensor<float>(Shape{1, 2, 3, 3}, rng);
  Graph<float> g;
  const Var in = g.input(x);
  EXPECT_EQ(ops::dropout(g, in, 0.0, 5).id, in.id);
}

TEST(Graph, BackwardRequiresScalar) {
  Graph<float> g;
  const Var x = g.input(Tensor<float>(Shape{1, 1, 2, 2}), true);
  EXPECT_THROW(g.backward(x), ShapeError);
}
