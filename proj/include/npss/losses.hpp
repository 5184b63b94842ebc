#pragma once

#include <cmath>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/np_head.hpp"
#include "npss/ops.hpp"

namespace npss {

inline constexpr double kDefaultLambdaKl = 0.005;

struct CrossEntropyTerm {
  Var sum;  // sum over valid pixels of -ln p[label]
  int count = 0;
};

/// Summed pixel cross entropy of an n_class x H x W probability map; probabilities are
/// clamped to >= 1e-12 before the log.
template <class T>
CrossEntropyTerm cross_entropy_sum(Tape<T>& tape, Var probs, const LabelMap& labels, int ignore_label = kIgnoreLabel) {
  const auto& p = tape.value(probs);
  if (p.rank() != 3 || labels.rank() != 2 || labels.dim(0) != p.dim(1) || labels.dim(1) != p.dim(2))
    throw ShapeError("cross_entropy: probs " + shape_str(p.shape()) + " vs labels " + shape_str(labels.shape()));
  const int n = p.dim(0), hw = p.dim(1) * p.dim(2);
  double s = 0;
  int count = 0;
  for (int i = 0; i < hw; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l == ignore_label) continue;
    if (l < 0 || l >= n) throw DataError("cross_entropy: label " + std::to_string(l) + " out of range");
    s -= std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(l) * hw + i]), kProbClamp));
    ++count;
  }
  Var v = tape.push(BasicTensor<T>({1}, static_cast<T>(s)), {probs}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    const auto& pv = tp.value(probs);
    auto& gp = tp.grad_buffer(probs);
    for (int i = 0; i < hw; ++i) {
      const int l = labels[static_cast<std::size_t>(i)];
      if (l == ignore_label) continue;
      const std::size_t idx = static_cast<std::size_t>(l) * hw + i;
      if (pv[idx] > static_cast<T>(kProbClamp)) gp[idx] -= gy[0] / pv[idx];
    }
  });
  return {v, count};
}

/// Mean pixel cross entropy over non-ignored pixels.
template <class T>
Var cross_entropy(Tape<T>& tape, Var probs, const LabelMap& labels, int ignore_label = kIgnoreLabel) {
  auto term = cross_entropy_sum(tape, probs, labels, ignore_label);
  if (term.count == 0) throw NumericError("cross_entropy: every pixel is ignored, loss undefined");
  return scale(tape, term.sum, static_cast<T>(1.0 / term.count));
}

/// KL(target || context) between diagonal Gaussians given as (mean, variance) vectors:
/// 0.5 * [sum ln(vc/vt) + sum vt/vc - D + sum (mc-mt)^2 / vc].
template <class T>
Var kl_gaussian(Tape<T>& tape, LatentVars target, LatentVars context) {
  const auto& mt = tape.value(target.mu);
  const auto& vt = tape.value(target.var);
  const auto& mc = tape.value(context.mu);
  const auto& vc = tape.value(context.var);
  const std::size_t d = mt.size();
  if (vt.size() != d || mc.size() != d || vc.size() != d) throw ShapeError("kl_gaussian: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) {
    if (!(vt[i] > 0) || !(vc[i] > 0)) throw NumericError("kl_gaussian: variances must be positive");
    const double diff = static_cast<double>(mc[i]) - mt[i];
    s += std::log(static_cast<double>(vc[i]) / vt[i]) + static_cast<double>(vt[i]) / vc[i] - 1.0 + diff * diff / vc[i];
  }
  s *= 0.5;
  if (!std::isfinite(s)) throw NumericError("kl_gaussian: non-finite result");
  return tape.push(BasicTensor<T>({1}, static_cast<T>(s)), {target.mu, target.var, context.mu, context.var},
                   [=](Tape<T>& tp, const BasicTensor<T>& gy) {
                     const auto& a = tp.value(target.mu);
                     const auto& av = tp.value(target.var);
                     const auto& b = tp.value(context.mu);
                     const auto& bv = tp.value(context.var);
                     std::vector<T> g_mt(d), g_vt(d), g_mc(d), g_vc(d);
                     const double g = gy[0];
                     for (std::size_t i = 0; i < d; ++i) {
                       const double diff = static_cast<double>(b[i]) - a[i];
                       const double ivc = 1.0 / bv[i];
                       g_mt[i] = static_cast<T>(-g * diff * ivc);
                       g_mc[i] = static_cast<T>(g * diff * ivc);
                       g_vt[i] = static_cast<T>(g * 0.5 * (ivc - 1.0 / av[i]));
                       g_vc[i] = static_cast<T>(g * 0.5 * (ivc - av[i] * ivc * ivc - diff * diff * ivc * ivc));
                     }
                     tp.accumulate(target.mu, g_mt);
                     tp.accumulate(target.var, g_vt);
                     tp.accumulate(context.mu, g_mc);
                     tp.accumulate(context.var, g_vc);
                   });
}

/// Value-level KL for plain distributions.
template <class T>
double kl_gaussian(const LatentDistribution<T>& target, const LatentDistribution<T>& context) {
  Tape<T> tape(false);
  const int d = static_cast<int>(target.mu.size());
  LatentVars t{tape.constant(BasicTensor<T>({d}, target.mu)), tape.constant(BasicTensor<T>({d}, target.var))};
  LatentVars c{tape.constant(BasicTensor<T>({d}, context.mu)), tape.constant(BasicTensor<T>({d}, context.var))};
  return static_cast<double>(tape.value(kl_gaussian(tape, t, c))[0]);
}

struct LossBreakdown {
  double l_c = 0.0;
  double l_kl = 0.0;
  double total = 0.0;
  int pixel_count = 0;
  bool operator==(const LossBreakdown&) const = default;
};

/// l_kl is the mean of the per-target KLs (0 when there are none); total = l_c + lambda * l_kl.
inline LossBreakdown total_loss(double l_c, const std::vector<double>& per_target_kls, double lambda_kl, int pixel_count = 0) {
  LossBreakdown out;
  out.l_c = l_c;
  double s = 0;
  for (double k : per_target_kls) s += k;
  out.l_kl = per_target_kls.empty() ? 0.0 : s / static_cast<double>(per_target_kls.size());
  out.total = l_c + lambda_kl * out.l_kl;
  out.pixel_count = pixel_count;
  return out;
}

}  // namespace npss
