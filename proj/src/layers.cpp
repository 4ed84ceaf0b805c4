#include "sslseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "sslseg/errors.hpp"

namespace sslseg {

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::GroupNormWS: return "GroupNormWS";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2x2: return "MaxPool2x2";
    case LayerKind::Upsample2x: return "Upsample2x";
    case LayerKind::Concat: return "Concat";
    case LayerKind::Sigmoid: return "Sigmoid";
  }
  return "?";
}

Tensor he_conv_kernel(std::size_t k, std::size_t in_ch, std::size_t out_ch,
                      Rng& rng) {
  const double fan_in = static_cast<double>(k * k * in_ch);
  const double std = std::sqrt(2.0 / fan_in);
  Tensor w({k, k, in_ch, out_ch});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
  return w;
}

std::vector<Tensor> init_layer_params(const LayerSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case LayerKind::Conv2D:
    case LayerKind::Upsample2x: {
      Tensor w = he_conv_kernel(spec.kernel, spec.in_ch, spec.out_ch, rng);
      Tensor b({spec.out_ch}, 0.0);
      return {std::move(w), std::move(b)};
    }
    case LayerKind::GroupNormWS: {
      Tensor gamma({spec.in_ch}, 1.0);
      Tensor beta({spec.in_ch}, 0.0);
      return {std::move(gamma), std::move(beta)};
    }
    default:
      return {};
  }
}

ValueId forward_layer(Tape& tape, const LayerSpec& spec,
                      std::span<const ValueId> params,
                      std::span<const ValueId> inputs) {
  auto need = [&](std::size_t n_params, std::size_t n_inputs) {
    if (params.size() != n_params || inputs.size() != n_inputs) {
      throw ShapeError(layer_kind_name(spec.kind) + ": expected " +
                       std::to_string(n_params) + " params / " +
                       std::to_string(n_inputs) + " inputs");
    }
  };
  switch (spec.kind) {
    case LayerKind::Conv2D: {
      need(2, 1);
      ValueId w = params[0];
      if (spec.weight_std) w = tape.weight_standardize(w, kWeightStdEps);
      return tape.conv2d(inputs[0], w, params[1], spec.stride);
    }
    case LayerKind::GroupNormWS:
      need(2, 1);
      return tape.group_norm(inputs[0], params[0], params[1], spec.groups,
                             kGroupNormEps);
    case LayerKind::ReLU:
      need(0, 1);
      return tape.relu(inputs[0]);
    case LayerKind::MaxPool2x2:
      need(0, 1);
      return tape.max_pool2x2(inputs[0]);
    case LayerKind::Upsample2x: {
      need(2, 1);
      ValueId up = tape.upsample_nearest2x(inputs[0]);
      ValueId w = params[0];
      if (spec.weight_std) w = tape.weight_standardize(w, kWeightStdEps);
      return tape.conv2d(up, w, params[1], 1);
    }
    case LayerKind::Concat:
      need(0, 2);
      return tape.concat_channels(inputs[0], inputs[1]);
    case LayerKind::Sigmoid:
      need(0, 1);
      return tape.sigmoid(inputs[0]);
  }
  throw ShapeError("forward_layer: unknown layer kind");
}

namespace {

// Random input that stays away from the kinks finite differences cannot
// handle: |x| >= margin for ReLU, pairwise-distinct pool windows.
Tensor gradcheck_input(const std::vector<std::size_t>& shape, Rng& rng,
                       double margin) {
  Tensor x(shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = rng.normal();
    while (std::abs(v) < margin) v = rng.normal();
    x[i] = v;
  }
  return x;
}

struct GradCheckSetup {
  LayerSpec spec;
  std::vector<Tensor> params;
  std::vector<Tensor> inputs;
};

GradCheckSetup make_setup(const LayerSpec& spec0, Rng& rng) {
  GradCheckSetup s;
  s.spec = spec0;
  switch (spec0.kind) {
    case LayerKind::Conv2D: {
      s.spec.kernel = spec0.kernel ? spec0.kernel : 3;
      s.spec.in_ch = spec0.in_ch ? spec0.in_ch : 3;
      s.spec.out_ch = spec0.out_ch ? spec0.out_ch : 4;
      s.inputs.push_back(gradcheck_input({2, 6, 6, s.spec.in_ch}, rng, 1e-3));
      break;
    }
    case LayerKind::Upsample2x: {
      s.spec.kernel = 3;
      s.spec.in_ch = spec0.in_ch ? spec0.in_ch : 3;
      s.spec.out_ch = spec0.out_ch ? spec0.out_ch : 2;
      s.inputs.push_back(gradcheck_input({2, 4, 4, s.spec.in_ch}, rng, 1e-3));
      break;
    }
    case LayerKind::GroupNormWS: {
      s.spec.in_ch = spec0.in_ch ? spec0.in_ch : 4;
      s.spec.groups = spec0.groups > 1 ? spec0.groups : 2;
      s.inputs.push_back(gradcheck_input({2, 5, 5, s.spec.in_ch}, rng, 1e-3));
      break;
    }
    case LayerKind::ReLU:
    case LayerKind::Sigmoid:
      s.inputs.push_back(gradcheck_input({2, 6, 6, 3}, rng, 1e-3));
      break;
    case LayerKind::MaxPool2x2: {
      // Spread values so no pool window has near-ties.
      Tensor x({2, 6, 6, 3});
      std::vector<double> levels(x.size());
      for (std::size_t i = 0; i < levels.size(); ++i)
        levels[i] = (static_cast<double>(i) - levels.size() / 2.0) * 0.01;
      rng.shuffle(levels);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = levels[i];
      s.inputs.push_back(std::move(x));
      break;
    }
    case LayerKind::Concat:
      s.inputs.push_back(gradcheck_input({2, 5, 5, 3}, rng, 1e-3));
      s.inputs.push_back(gradcheck_input({2, 5, 5, 2}, rng, 1e-3));
      break;
  }
  s.params = init_layer_params(s.spec, rng);
  // Zero biases and constant gammas hide scaling bugs; perturb them.
  if (s.spec.kind == LayerKind::Conv2D || s.spec.kind == LayerKind::Upsample2x) {
    for (std::size_t i = 0; i < s.params[1].size(); ++i)
      s.params[1][i] = 0.1 * rng.normal();
  }
  if (s.spec.kind == LayerKind::GroupNormWS) {
    for (std::size_t i = 0; i < s.params[0].size(); ++i)
      s.params[0][i] = 1.0 + 0.2 * rng.normal();
    for (std::size_t i = 0; i < s.params[1].size(); ++i)
      s.params[1][i] = 0.1 * rng.normal();
  }
  return s;
}

double run_loss(const GradCheckSetup& s, const Tensor& proj) {
  Tape tape;
  std::vector<ValueId> param_ids, input_ids;
  for (const Tensor& p : s.params) param_ids.push_back(tape.leaf(p));
  for (const Tensor& x : s.inputs) input_ids.push_back(tape.leaf(x));
  ValueId out = forward_layer(tape, s.spec, param_ids, input_ids);
  return tape.value(tape.weighted_sum(out, proj)).item();
}

}  // namespace

double grad_check(const LayerSpec& spec0, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x67C6A375ull));
  GradCheckSetup s = make_setup(spec0, rng);

  // Random projection weights give full Jacobian coverage with one backward.
  Tensor proj;
  std::vector<Tensor> analytic_params, analytic_inputs;
  {
    Tape tape;
    std::vector<ValueId> param_ids, input_ids;
    for (const Tensor& p : s.params) param_ids.push_back(tape.leaf(p));
    for (const Tensor& x : s.inputs) input_ids.push_back(tape.leaf(x));
    ValueId out = forward_layer(tape, s.spec, param_ids, input_ids);
    proj = Tensor(tape.value(out).shape());
    for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = rng.normal();
    ValueId loss = tape.weighted_sum(out, proj);
    tape.backward(loss);
    for (ValueId id : param_ids) analytic_params.push_back(tape.grad(id));
    for (ValueId id : input_ids) analytic_inputs.push_back(tape.grad(id));
  }

  const double h = 1e-5;
  double max_err = 0.0;
  auto check_tensor = [&](Tensor& t, const Tensor& analytic) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = run_loss(s, proj);
      t[i] = orig - h;
      const double down = run_loss(s, proj);
      t[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[i];
      const double err =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      max_err = std::max(max_err, err);
    }
  };
  for (std::size_t p = 0; p < s.params.size(); ++p)
    check_tensor(s.params[p], analytic_params[p]);
  for (std::size_t x = 0; x < s.inputs.size(); ++x)
    check_tensor(s.inputs[x], analytic_inputs[x]);
  return max_err;
}

double grad_check(LayerKind kind, std::uint64_t seed) {
  LayerSpec spec;
  spec.kind = kind;
  if (kind == LayerKind::Conv2D) spec.weight_std = false;
  return grad_check(spec, seed);
}

}  // namespace sslseg
