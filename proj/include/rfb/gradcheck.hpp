#pragma once

#include "rfb/nn.hpp"
#include "rfb/synth.hpp"
#include "rfb/train.hpp"

#include <functional>

namespace rfb {

/// Tensor-valued function of a list of tensors; the checked scalar is the
/// weighted sum of its outputs.
using TensorFn = std::function<Tensor<double>(const std::vector<Tensor<double>> &)>;

struct CaseOutcome {
  double max_rel_err = 0;
  bool straddles_kink = false;
};

/// Relative error |a - n| / max(|a|, |n|, 1e-8) between the analytic gradient
/// of sum(w * f(x)) and central differences with step eps, maximized over
/// every input element. Output differences are formed before weighting so
/// that outputs a perturbation does not reach cancel exactly.
/// With `kink_guard`, a case whose one-sided differences disagree beyond
/// round-off is reported as straddling a non-differentiable point.
inline CaseOutcome check_gradients(const TensorFn &f, const std::vector<double> &weights,
                                   const std::vector<Tensor<double>> &inputs, double eps = 1e-4,
                                   bool kink_guard = false) {
  std::vector<Tensor<double>> leaves;
  for (const auto &t : inputs)
    leaves.emplace_back(t.shape(), t.data(), true);
  Tensor<double> loss = weighted_sum(f(leaves), weights);
  backward(loss);

  std::vector<Tensor<double>> probe;
  for (const auto &t : inputs)
    probe.push_back(t.clone());
  const std::vector<double> y0 = f(probe).data();
  CaseOutcome out;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    auto &x = probe[i].data();
    const std::vector<double> zero(x.size(), 0.0);
    const auto &g = leaves[i].has_grad() ? leaves[i].grad() : zero;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double orig = x[j];
      x[j] = orig + eps;
      const std::vector<double> yp = f(probe).data();
      x[j] = orig - eps;
      const std::vector<double> ym = f(probe).data();
      x[j] = orig;
      double central = 0, fwd = 0, bwd = 0;
      for (std::size_t k = 0; k < y0.size(); ++k) {
        central += weights[k] * (yp[k] - ym[k]);
        fwd += weights[k] * (yp[k] - y0[k]);
        bwd += weights[k] * (y0[k] - ym[k]);
      }
      fwd /= eps;
      bwd /= eps;
      if (kink_guard &&
          std::abs(fwd - bwd) > 1e-7 * std::max({std::abs(fwd), std::abs(bwd), 1.0})) {
        out.straddles_kink = true;
        return out;
      }
      const double num = central / (2 * eps);
      const double denom = std::max({std::abs(g[j]), std::abs(num), 1e-8});
      out.max_rel_err = std::max(out.max_rel_err, std::abs(g[j] - num) / denom);
    }
  }
  return out;
}

struct GradCheckRow {
  std::string op;
  std::size_t cases = 0;
  std::size_t redrawn = 0;
  double max_rel_err = 0;
  bool pass = false;
};

namespace detail {

inline Tensor<double> random_tensor(SplitMix64 &rng, Shape s, double scale = 1.0) {
  std::vector<double> v(s.numel());
  for (double &x : v)
    x = scale * rng.normal();
  return Tensor<double>(s, std::move(v));
}

inline std::vector<double> random_weights(SplitMix64 &rng, std::size_t n) {
  std::vector<double> w(n);
  for (double &x : w)
    x = rng.uniform(-1, 1);
  return w;
}

inline std::size_t pick(SplitMix64 &rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo),
                                                  static_cast<std::int64_t>(hi)));
}

// Distinct values spaced at least 0.01 apart, shuffled: no ties for max pool.
inline Tensor<double> distinct_tensor(SplitMix64 &rng, Shape s) {
  std::vector<double> v(s.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = -1.0 + 0.02 * static_cast<double>(i) + 0.005 * rng.uniform();
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.next() % i)]);
  return Tensor<double>(s, std::move(v));
}

// One case: inputs, function, and whether it is piecewise linear.
struct GradCase {
  std::vector<Tensor<double>> inputs;
  TensorFn fn;
  std::vector<double> weights;
  bool guard = false;
};

using CaseMaker = std::function<GradCase(SplitMix64 &, std::size_t index)>;

inline GradCase conv_case(SplitMix64 &rng, std::size_t index) {
  static const std::size_t dilations[] = {1, 2, 3, 5};
  static const std::pair<std::size_t, std::size_t> kernels[] = {{3, 3}, {1, 3}, {3, 1}, {3, 3}};
  const std::size_t d = dilations[index % 4];
  const auto [kh, kw] = kernels[(index / 4) % 4];
  const std::size_t stride = (index % 3 == 2) ? 2 : 1;
  const Shape is{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 4, 8), pick(rng, 4, 8)};
  const std::size_t cout = pick(rng, 1, 4);
  ConvParams p = ConvParams::same(kh, kw, stride, d);
  GradCase c;
  c.inputs = {random_tensor(rng, is), random_tensor(rng, Shape{cout, is.c, kh, kw}),
              random_tensor(rng, Shape{cout, 1, 1, 1})};
  const Shape os{is.n, cout, p.out_h(is.h), p.out_w(is.w)};
  c.weights = random_weights(rng, os.numel());
  c.fn = [p](const std::vector<Tensor<double>> &x) { return conv2d<double>(x[0], x[1], x[2], p); };
  return c;
}

inline GradCase pool_case(SplitMix64 &rng, std::size_t index, PoolKind kind) {
  const std::size_t d = std::array<std::size_t, 3>{1, 2, 3}[index % 3];
  const std::size_t stride = index % 2 ? 2 : 1;
  const Shape is{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 4, 8), pick(rng, 4, 8)};
  const ConvParams p = ConvParams::same(3, 3, stride, d);
  GradCase c;
  c.inputs = {kind == PoolKind::max ? distinct_tensor(rng, is) : random_tensor(rng, is)};
  const Shape os{is.n, is.c, p.out_h(is.h), p.out_w(is.w)};
  c.weights = random_weights(rng, os.numel());
  c.fn = [p, kind](const std::vector<Tensor<double>> &x) { return pool2d(x[0], kind, p); };
  return c;
}

inline Shape small_shape(SplitMix64 &rng) {
  return {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 8), pick(rng, 1, 8)};
}

inline GradCase relu_case(SplitMix64 &rng, std::size_t) {
  const Shape s = small_shape(rng);
  std::vector<double> v(s.numel());
  for (double &x : v) {
    const double mag = rng.uniform(0.05, 2.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  GradCase c;
  c.inputs = {Tensor<double>(s, std::move(v))};
  c.weights = random_weights(rng, s.numel());
  c.fn = [](const std::vector<Tensor<double>> &x) { return relu(x[0]); };
  return c;
}

inline GradCase concat_case(SplitMix64 &rng, std::size_t) {
  const std::size_t n = pick(rng, 1, 2), h = pick(rng, 1, 8), w = pick(rng, 1, 8);
  const std::size_t parts = pick(rng, 1, 4);
  GradCase c;
  std::size_t channels = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    const std::size_t ch = pick(rng, 1, 4);
    channels += ch;
    c.inputs.push_back(random_tensor(rng, Shape{n, ch, h, w}));
  }
  c.weights = random_weights(rng, n * channels * h * w);
  c.fn = [](const std::vector<Tensor<double>> &x) { return concat_channels(x); };
  return c;
}

inline GradCase scale_add_case(SplitMix64 &rng, std::size_t) {
  const Shape s = small_shape(rng);
  const double alpha = rng.uniform(-1, 1);
  GradCase c;
  c.inputs = {random_tensor(rng, s), random_tensor(rng, s)};
  c.weights = random_weights(rng, s.numel());
  c.fn = [alpha](const std::vector<Tensor<double>> &x) { return scale_add(x[0], x[1], alpha); };
  return c;
}

inline GradCase softmax_case(SplitMix64 &rng, std::size_t) {
  const std::size_t rows = pick(rng, 1, 8), k = pick(rng, 2, 8);
  std::vector<std::size_t> labels(rows);
  for (auto &l : labels)
    l = pick(rng, 0, k - 1);
  GradCase c;
  c.inputs = {random_tensor(rng, Shape{rows, k, 1, 1}, 2.0)};
  c.weights = random_weights(rng, rows);
  c.fn = [labels](const std::vector<Tensor<double>> &x) { return softmax_ce(x[0], labels); };
  return c;
}

inline GradCase smooth_l1_case(SplitMix64 &rng, std::size_t) {
  const Shape s = small_shape(rng);
  Tensor<double> target = random_tensor(rng, s);
  std::vector<double> pred(s.numel());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    // Keep |pred - target| away from the switch point at 1.
    double d = rng.uniform(-3, 3);
    if (std::abs(std::abs(d) - 1) < 0.05)
      d += d > 0 ? 0.2 : -0.2;
    pred[i] = target.data()[i] + d;
  }
  GradCase c;
  c.inputs = {Tensor<double>(s, std::move(pred)), target};
  c.weights = random_weights(rng, s.numel());
  c.fn = [](const std::vector<Tensor<double>> &x) { return smooth_l1(x[0], x[1]); };
  return c;
}

// Whole block: input and every parameter are checked.
inline GradCase block_case(SplitMix64 &rng, std::size_t index) {
  static const char *kinds[] = {"rfb", "rfb_s", "rfb", "aspp_s"};
  static const TrailingKind trailing[] = {TrailingKind::conv, TrailingKind::maxpool,
                                          TrailingKind::avgpool};
  RfbOptions o;
  o.bottleneck = 2;
  o.alpha = 0.5;
  o.trailing = trailing[index % 3];
  const std::string kind = kinds[index % 4];
  o.stride = (kind == "rfb" && index % 2) ? 2 : 1;
  const std::size_t in = pick(rng, 2, 4), out = pick(rng, 2, 4);
  const BlockSpec spec = make_named_block(kind, in, out, o);
  auto net = std::make_shared<BlockNet<double>>(spec);
  msra_init(net->store, rng.next());
  const std::size_t hw = o.stride == 2 ? 2 * pick(rng, 3, 4) : pick(rng, 5, 8);
  GradCase c;
  c.inputs.push_back(random_tensor(rng, Shape{1, in, hw, hw}));
  for (const auto &t : net->store.tensors())
    c.inputs.push_back(t.numel() == 0 ? t.clone() : random_tensor(rng, t.shape(), 0.5));
  const Tensor<double> probe = net->forward(c.inputs[0]);
  c.weights = random_weights(rng, probe.numel());
  c.fn = [net](const std::vector<Tensor<double>> &x) {
    ParamView<double> params(x.data() + 1, x.size() - 1);
    return net->forward(params, x[0]);
  };
  c.guard = true;
  return c;
}

inline GradCheckRow run_op(const std::string &name, const CaseMaker &make, std::size_t cases,
                           std::uint64_t seed, double tolerance) {
  SplitMix64 rng(seed);
  GradCheckRow row;
  row.op = name;
  for (std::size_t i = 0; i < cases;) {
    GradCase c = make(rng, i);
    const CaseOutcome r = check_gradients(c.fn, c.weights, c.inputs, 1e-4, c.guard);
    if (r.straddles_kink) {
      if (++row.redrawn > 10 * cases)
        throw NumericError("gradcheck: too many cases straddle non-differentiable points");
      continue;
    }
    row.max_rel_err = std::max(row.max_rel_err, r.max_rel_err);
    ++row.cases;
    ++i;
  }
  row.pass = row.max_rel_err <= tolerance;
  return row;
}

} // namespace detail

/// Gradient checks at 64-bit over `cases` random shapes per op.
/// `group` is all | conv | pool | loss.
inline std::vector<GradCheckRow> run_gradcheck(const std::string &group, std::uint64_t seed = 0,
                                               std::size_t cases = 20, double tolerance = 1e-6) {
  using namespace detail;
  std::vector<std::pair<std::string, CaseMaker>> ops;
  const bool all = group == "all";
  if (!all && group != "conv" && group != "pool" && group != "loss")
    throw ShapeError("gradcheck: unknown op group '" + group + "' (all|conv|pool|loss)");
  if (all || group == "conv")
    ops.emplace_back("conv2d", conv_case);
  if (all || group == "pool") {
    ops.emplace_back("maxpool2d", [](SplitMix64 &r, std::size_t i) {
      return pool_case(r, i, PoolKind::max);
    });
    ops.emplace_back("avgpool2d", [](SplitMix64 &r, std::size_t i) {
      return pool_case(r, i, PoolKind::avg);
    });
  }
  if (all) {
    ops.emplace_back("relu", relu_case);
    ops.emplace_back("concat_channels", concat_case);
    ops.emplace_back("scale_add", scale_add_case);
  }
  if (all || group == "loss") {
    ops.emplace_back("softmax_ce", softmax_case);
    ops.emplace_back("smooth_l1", smooth_l1_case);
  }
  if (all)
    ops.emplace_back("rfb_block", block_case);
  std::vector<GradCheckRow> rows;
  for (std::size_t i = 0; i < ops.size(); ++i)
    rows.push_back(run_op(ops[i].first, ops[i].second, cases, derive_seed(seed, i, 5), tolerance));
  return rows;
}

} // namespace rfb
