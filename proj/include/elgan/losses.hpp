#pragma once

#include "elgan/graph.hpp"
#include "elgan/networks.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace elgan {

/// Clip bound applied inside every logarithm.
inline constexpr double kLogEpsilon = 1e-7;

/// Raised when a loss receives NaN / non-finite inputs or an invalid target.
class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AdvLoss { cross_entropy, embedding };

std::string to_string(AdvLoss l);
AdvLoss parse_adv_loss(const std::string& s);

/// Which adversarial objective each network trains with.
struct LossSelection {
  AdvLoss generator_adv = AdvLoss::embedding;
  AdvLoss discriminator = AdvLoss::cross_entropy;
  double lambda_adv = 1.0;
  bool emb_normalize = false;

  void validate() const {
    if (!(lambda_adv >= 0.0)) throw ConfigError("lambda_adv must be >= 0");
  }
};

/// total == fit + lambda * adv; `components` holds "fit" and (when computed) "adv".
struct LossValue {
  double total = 0.0;
  std::map<std::string, double> components;
};

// Target convention used by every binary cross-entropy below: real (label) -> 0,
// fake (prediction) -> 1. This is the reverse of the common GAN convention.
inline constexpr double kRealTarget = 0.0;
inline constexpr double kFakeTarget = 1.0;

namespace detail {

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* what) {
  if (!t.array().isFinite().all()) throw LossError(std::string(what) + ": non-finite input");
}

}  // namespace detail

/// Pixel-wise categorical cross entropy -(1/(w h)) sum y ln clip(p), averaged over the batch.
template <typename Scalar>
double loss_cce(const Tensor<Scalar>& pred, const Tensor<Scalar>& label) {
  require_same_shape(pred.shape(), label.shape(), "loss_cce");
  detail::require_finite(pred, "loss_cce");
  detail::require_finite(label, "loss_cce");
  const auto clipped = pred.array().max(Scalar(kLogEpsilon)).min(Scalar(1));
  const double sum = (label.array() * clipped.log()).template cast<double>().sum();
  return -sum / static_cast<double>(pred.shape().n * pred.shape().plane());
}

/// Mean binary cross entropy of a score map against a constant target in {0, 1}.
template <typename Scalar>
double loss_bce(const Tensor<Scalar>& scores, double target) {
  if (target != 0.0 && target != 1.0) throw LossError("loss_bce: target must be 0 or 1");
  detail::require_finite(scores, "loss_bce");
  const auto z = scores.array().max(Scalar(kLogEpsilon)).min(Scalar(1.0 - kLogEpsilon));
  const Scalar t = static_cast<Scalar>(target);
  const auto per = -t * z.log() - (Scalar(1) - t) * (Scalar(1) - z).log();
  return per.template cast<double>().sum() / static_cast<double>(scores.size());
}

/// Euclidean distance between flattened embeddings, averaged over the batch
/// (per-sample norms). With `normalize` each norm is divided by sqrt(elements per sample).
template <typename Scalar>
double loss_emb(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool normalize = false) {
  require_same_shape(a.shape(), b.shape(), "loss_emb");
  const Index n = a.shape().n;
  const Index per = a.shape().sample();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto d = (a.sample(i) - b.sample(i)).template cast<double>();
    double norm = d.norm();
    if (normalize) norm /= std::sqrt(static_cast<double>(per));
    total += norm;
  }
  return total / static_cast<double>(n);
}

namespace ops {

template <typename Scalar>
Var cce(Graph<Scalar>& g, Var pred, Var label) {
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<Scalar>(loss_cce(g.value(pred), g.value(label)));
  return g.emit(std::move(out), g.requires_grad(pred), [pred, label](Graph<Scalar>& g, Var self) {
    const auto& p = g.value(pred);
    const Scalar scale = g.grad(self).data()[0] / static_cast<Scalar>(p.shape().n * p.shape().plane());
    const Scalar eps = static_cast<Scalar>(kLogEpsilon);
    g.grad(pred).array() += (p.array() >= eps).select(-scale * g.value(label).array() / p.array(), Scalar(0));
  });
}

template <typename Scalar>
Var bce(Graph<Scalar>& g, Var scores, double target) {
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<Scalar>(loss_bce(g.value(scores), target));
  return g.emit(std::move(out), g.requires_grad(scores), [scores, target](Graph<Scalar>& g, Var self) {
    const auto& z = g.value(scores).array();
    const Scalar scale = g.grad(self).data()[0] / static_cast<Scalar>(z.size());
    const Scalar lo = static_cast<Scalar>(kLogEpsilon);
    const Scalar hi = static_cast<Scalar>(1.0 - kLogEpsilon);
    const Scalar t = static_cast<Scalar>(target);
    const auto d = scale * (-t / z + (Scalar(1) - t) / (Scalar(1) - z));
    g.grad(scores).array() += (z >= lo && z <= hi).select(d, Scalar(0));
  });
}

template <typename Scalar>
Var emb(Graph<Scalar>& g, Var a, Var b, bool normalize) {
  const Tensor<Scalar>& av = g.value(a);
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<Scalar>(loss_emb(av, g.value(b), normalize));
  return g.emit(std::move(out), g.requires_grad(a) || g.requires_grad(b), [a, b, normalize](Graph<Scalar>& g, Var self) {
    const Tensor<Scalar>& av = g.value(a);
    const Tensor<Scalar>& bv = g.value(b);
    const Index n = av.shape().n;
    const double per = static_cast<double>(av.shape().sample());
    for (Index i = 0; i < n; ++i) {
      const auto d = (av.sample(i) - bv.sample(i)).eval();
      const double norm = d.template cast<double>().norm();
      if (norm == 0.0) continue;  // subgradient 0 at the identity
      double coeff = static_cast<double>(g.grad(self).data()[0]) / (norm * static_cast<double>(n));
      if (normalize) coeff /= std::sqrt(per);
      const Scalar c = static_cast<Scalar>(coeff);
      if (g.requires_grad(a)) g.grad(a).sample(i) += c * d;
      if (g.requires_grad(b)) g.grad(b).sample(i) -= c * d;
    }
  });
}

}  // namespace ops

/// Records the generator objective on `g`: fit = cce(G(x), y) and, when lambda > 0,
/// adv = bce(D(x, G(x)), real) or emb(D_e(x, G(x)), D_e(x, y)). Only generator
/// parameters are tracked; the discriminator acts as a fixed function.
template <typename Scalar>
Var generator_objective(Graph<Scalar>& g, Var x, Var y, Generator<Scalar>& gen, Discriminator<Scalar>& disc,
                        const LossSelection& sel, Mode mode, std::uint64_t dropout_seed, LossValue& value) {
  const Var pred = gen.forward(g, x, mode, true, dropout_seed);
  const Var fit = ops::cce(g, pred, y);
  value.components = {{"fit", g.scalar(fit)}};
  if (sel.lambda_adv == 0.0) {
    value.total = g.scalar(fit);
    return fit;
  }
  Var adv;
  if (sel.generator_adv == AdvLoss::cross_entropy) {
    adv = ops::bce(g, disc.forward(g, x, pred, false).patch, kRealTarget);
  } else {
    const Var pred_emb = disc.forward(g, x, pred, false).embedding;
    const Var label_emb = disc.forward(g, x, y, false).embedding;
    adv = ops::emb(g, pred_emb, label_emb, sel.emb_normalize);
  }
  const Var total = ops::add_scaled(g, fit, adv, static_cast<Scalar>(sel.lambda_adv));
  value.components["adv"] = g.scalar(adv);
  value.total = g.scalar(total);
  return total;
}

/// Records the discriminator objective with G(x) given as a constant prediction.
/// cross_entropy: bce(D(x, G(x)), fake) + bce(D(x, y), real); embedding: -emb(...).
template <typename Scalar>
Var discriminator_objective(Graph<Scalar>& g, Var x, Var y, Var pred, Discriminator<Scalar>& disc,
                            const LossSelection& sel) {
  if (sel.discriminator == AdvLoss::cross_entropy) {
    const Var fake = ops::bce(g, disc.forward(g, x, pred, true).patch, kFakeTarget);
    const Var real = ops::bce(g, disc.forward(g, x, y, true).patch, kRealTarget);
    return ops::add_scaled(g, fake, real, Scalar(1));
  }
  const Var pred_emb = disc.forward(g, x, pred, true).embedding;
  const Var label_emb = disc.forward(g, x, y, true).embedding;
  return ops::scale(g, ops::emb(g, pred_emb, label_emb, sel.emb_normalize), Scalar(-1));
}

/// Evaluates the generator loss and accumulates d/d(theta_gen) into gen.params() grads.
template <typename Scalar>
LossValue generator_loss(const Tensor<Scalar>& x, const Tensor<Scalar>& y, Generator<Scalar>& gen,
                         Discriminator<Scalar>& disc, const LossSelection& sel, Mode mode = Mode::infer,
                         std::uint64_t dropout_seed = 0) {
  Graph<Scalar> g;
  LossValue value;
  const Var total = generator_objective(g, g.input(x), g.input(y), gen, disc, sel, mode, dropout_seed, value);
  g.backward(total);
  return value;
}

/// Evaluates the discriminator loss and accumulates d/d(theta_disc) into disc.params() grads.
/// G(x) is computed in inference mode and treated as a constant.
template <typename Scalar>
double discriminator_loss(const Tensor<Scalar>& x, const Tensor<Scalar>& y, Generator<Scalar>& gen,
                          Discriminator<Scalar>& disc, const LossSelection& sel) {
  const Tensor<Scalar> pred = gen.predict(x);
  Graph<Scalar> g;
  const Var total = discriminator_objective(g, g.input(x), g.input(y), g.input(pred), disc, sel);
  g.backward(total);
  return static_cast<double>(g.scalar(total));
}

}  // namespace elgan
