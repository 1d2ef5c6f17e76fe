#pragma once

// DDPM machinery: linear noise schedule, forward-process sampling, the
// epsilon-prediction training step with an adaptive-moment optimizer, ancestral
// sampling with optional classifier-free guidance, and evenly-strided timestep
// respacing for few-step generation.

#include <algorithm>
#include <cmath>
#include <vector>

#include "udit/model.hpp"

namespace udit {

struct NoiseSchedule {
  std::int64_t steps = 0;
  std::vector<double> betas, alphas, alpha_bars, posterior_var;

  static NoiseSchedule linear(std::int64_t T = 1000, double beta_start = 1e-4,
                              double beta_end = 2e-2) {
    if (T < 1) throw ConfigError("schedule: need at least one step");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
      throw ConfigError("schedule: betas must satisfy 0 < start <= end < 1");
    NoiseSchedule ns;
    ns.steps = T;
    ns.betas.resize(static_cast<std::size_t>(T));
    ns.alphas.resize(static_cast<std::size_t>(T));
    ns.alpha_bars.resize(static_cast<std::size_t>(T));
    ns.posterior_var.resize(static_cast<std::size_t>(T));
    double bar = 1.0;
    for (std::int64_t t = 0; t < T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
      const double beta = beta_start + (beta_end - beta_start) * frac;
      const double prev_bar = bar;
      bar *= 1.0 - beta;
      ns.betas[static_cast<std::size_t>(t)] = beta;
      ns.alphas[static_cast<std::size_t>(t)] = 1.0 - beta;
      ns.alpha_bars[static_cast<std::size_t>(t)] = bar;
      // variance of q(x_{t-1} | x_t, x_0), with abar_{-1} = 1 (zero at t = 0)
      ns.posterior_var[static_cast<std::size_t>(t)] = (1.0 - prev_bar) / (1.0 - bar) * beta;
    }
    return ns;
  }

  void check_t(std::int64_t t) const {
    if (t < 0 || t >= steps)
      throw ConfigError("schedule: timestep " + std::to_string(t) + " outside [0, " +
                        std::to_string(steps) + ")");
  }
};

// Forward-process marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one
// timestep per batch element. Pure data, never recorded on a tape.
template <typename T>
Tensor<T> q_sample(const NoiseSchedule& ns, const Tensor<T>& x0,
                   const std::vector<std::int64_t>& t, const Tensor<T>& eps) {
  check_shape(x0.shape() == eps.shape(), "q_sample: x0 " + shape_str(x0.shape()) +
                                             " and eps " + shape_str(eps.shape()) + " differ");
  check_shape(x0.rank() >= 1 && static_cast<std::int64_t>(t.size()) == x0.dim(0),
              "q_sample: need one timestep per batch element");
  auto out = Tensor<T>::zeros(x0.shape());
  const std::int64_t per = x0.numel() / x0.dim(0);
  for (std::int64_t b = 0; b < x0.dim(0); ++b) {
    const std::int64_t tb = t[static_cast<std::size_t>(b)];
    ns.check_t(tb);
    const double bar = ns.alpha_bars[static_cast<std::size_t>(tb)];
    const T ca = static_cast<T>(std::sqrt(bar));
    const T ce = static_cast<T>(std::sqrt(1.0 - bar));
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i)
      out.data_mut()[i] = ca * x0.data()[i] + ce * eps.data()[i];
  }
  return out;
}

// Mean of q(x_{t-1} | x_t, x_0) in closed form.
template <typename T>
Tensor<T> posterior_mean(const NoiseSchedule& ns, const Tensor<T>& x0, const Tensor<T>& xt,
                         std::int64_t t) {
  ns.check_t(t);
  const double bar = ns.alpha_bars[static_cast<std::size_t>(t)];
  const double prev_bar = t > 0 ? ns.alpha_bars[static_cast<std::size_t>(t - 1)] : 1.0;
  const double beta = ns.betas[static_cast<std::size_t>(t)];
  const double alpha = ns.alphas[static_cast<std::size_t>(t)];
  const double c0 = std::sqrt(prev_bar) * beta / (1.0 - bar);
  const double ct = std::sqrt(alpha) * (1.0 - prev_bar) / (1.0 - bar);
  auto out = Tensor<T>::zeros(x0.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data_mut()[i] =
        static_cast<T>(c0 * static_cast<double>(x0.data()[i]) +
                       ct * static_cast<double>(xt.data()[i]));
  return out;
}

namespace detail {

struct StepCoeffs {
  double beta_eff, alpha_eff, abar_cur, sigma2;
};

// Coefficients for one reverse step from original timestep t down to t_prev
// (t_prev = -1 denotes the final step, i.e. abar_prev = 1). Adjacent pairs use
// the stored schedule arrays; strided pairs derive an effective step from the
// alpha-bar ratio.
inline StepCoeffs step_coeffs(const NoiseSchedule& ns, std::int64_t t, std::int64_t t_prev) {
  ns.check_t(t);
  if (t_prev >= t) throw ConfigError("reverse step: t_prev must be below t");
  StepCoeffs c{};
  c.abar_cur = ns.alpha_bars[static_cast<std::size_t>(t)];
  if (t_prev == t - 1) {
    c.beta_eff = ns.betas[static_cast<std::size_t>(t)];
    c.alpha_eff = ns.alphas[static_cast<std::size_t>(t)];
    c.sigma2 = ns.posterior_var[static_cast<std::size_t>(t)];
  } else {
    const double abar_prev = t_prev < 0 ? 1.0 : ns.alpha_bars[static_cast<std::size_t>(t_prev)];
    c.alpha_eff = c.abar_cur / abar_prev;
    c.beta_eff = 1.0 - c.alpha_eff;
    c.sigma2 = (1.0 - abar_prev) / (1.0 - c.abar_cur) * c.beta_eff;
  }
  return c;
}

}  // namespace detail

// mu = (x_t - beta / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha), the model-side
// estimate of the posterior mean.
template <typename T>
Tensor<T> denoise_mean(const NoiseSchedule& ns, const Tensor<T>& xt, const Tensor<T>& eps_hat,
                       std::int64_t t, std::int64_t t_prev) {
  check_shape(xt.shape() == eps_hat.shape(), "denoise_mean: shape mismatch");
  const auto c = detail::step_coeffs(ns, t, t_prev);
  const double k_eps = c.beta_eff / std::sqrt(1.0 - c.abar_cur);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha_eff);
  auto out = Tensor<T>::zeros(xt.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data_mut()[i] = static_cast<T>(
        (static_cast<double>(xt.data()[i]) - k_eps * static_cast<double>(eps_hat.data()[i])) *
        inv_sqrt_alpha);
  return out;
}

// One ancestral step for a whole batch at shared timestep t. Noise sigma * z
// is added except on the final step (t_prev = -1). Guidance scale w routes
// through forward_cfg; w = 1 is the plain conditional pass.
template <typename T>
Tensor<T> p_sample_step(const ModelParams<T>& m, const NoiseSchedule& ns, const Tensor<T>& xt,
                        std::int64_t t, std::int64_t t_prev, const std::vector<std::int64_t>& y,
                        double w, Rng& rng) {
  std::vector<std::int64_t> tv(static_cast<std::size_t>(xt.dim(0)), t);
  auto eps_hat = w == 1.0 ? forward(m, xt, tv, y) : forward_cfg(m, xt, tv, y, w);
  auto x = denoise_mean(ns, xt, eps_hat, t, t_prev);
  if (t_prev >= 0) {
    const double sigma = std::sqrt(detail::step_coeffs(ns, t, t_prev).sigma2);
    for (auto& v : x.data_mut()) v += static_cast<T>(sigma * rng.normal());
  }
  for (auto v : x.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("sampling diverged at timestep " + std::to_string(t));
  return x;
}

// Evenly spaced subset of the original timesteps, endpoints included, strictly
// increasing.
inline std::vector<std::int64_t> respaced_timesteps(std::int64_t T, std::int64_t steps) {
  if (steps < 1 || steps > T)
    throw ConfigError("respacing: steps must lie in [1, " + std::to_string(T) + "]");
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(steps));
  if (steps == 1) {
    out.push_back(T - 1);
    return out;
  }
  for (std::int64_t k = 0; k < steps; ++k)
    out.push_back(static_cast<std::int64_t>(std::llround(
        static_cast<double>(k) * static_cast<double>(T - 1) / static_cast<double>(steps - 1))));
  return out;
}

// Ancestral sampling from pure noise. Deterministic given the seed; labels are
// one class per sample.
template <typename T>
Tensor<T> sample(const ModelParams<T>& m, const NoiseSchedule& ns, std::int64_t n,
                 const std::vector<std::int64_t>& y, double w, std::int64_t steps,
                 std::uint64_t seed) {
  check_shape(static_cast<std::int64_t>(y.size()) == n, "sample: need one label per sample");
  const auto& c = m.cfg;
  auto timeline = respaced_timesteps(ns.steps, steps);
  Rng rng(seed);
  auto x = Tensor<T>::zeros({n, c.latent_channels, c.latent_h, c.latent_w});
  rng.fill_normal(std::span<T>(x.data_mut()));
  for (std::int64_t k = static_cast<std::int64_t>(timeline.size()) - 1; k >= 0; --k) {
    const std::int64_t t = timeline[static_cast<std::size_t>(k)];
    const std::int64_t t_prev = k > 0 ? timeline[static_cast<std::size_t>(k - 1)] : -1;
    x = p_sample_step(m, ns, x, t, t_prev, y, w, rng);
  }
  return x;
}

struct TrainHp {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  bool ema = false;
  double ema_decay = 0.9999;
};

template <typename T>
struct TrainState {
  ModelParams<T> model;
  NoiseSchedule schedule;
  TrainHp hp;
  std::vector<Tensor<T>> adam_m, adam_v, ema;
  std::int64_t step = 0;
  Rng rng;
  std::int64_t dropped_labels = 0;  // labels replaced by the null row so far

  TrainState() : rng(0) {}
};

template <typename T>
std::vector<Tensor<T>*> collect_params(ModelParams<T>& m) {
  std::vector<Tensor<T>*> out;
  visit_params(m, [&out](const std::string&, Tensor<T>& t, const Shape&, SlotInit) {
    out.push_back(&t);
  });
  return out;
}

template <typename T>
TrainState<T> init_train_state(const UDiTConfig& cfg, const NoiseSchedule& ns, const TrainHp& hp,
                               std::uint64_t seed) {
  TrainState<T> st;
  st.model = build_model<T>(cfg, seed);
  st.schedule = ns;
  st.hp = hp;
  st.rng = Rng(seed).fork(0x7261696eull);  // independent of the init stream
  for (auto* p : collect_params(st.model)) {
    p->set_requires_grad(true);
    st.adam_m.push_back(Tensor<T>::zeros(p->shape()));
    st.adam_v.push_back(Tensor<T>::zeros(p->shape()));
    if (hp.ema) st.ema.push_back(Tensor<T>::from_vector(p->shape(), p->data()));
  }
  return st;
}

// One optimizer step on a batch: sample timesteps and noise, apply label
// dropout toward the null row, minimize mean squared error between predicted
// and true noise. Returns the loss. Throws NumericError on a non-finite loss
// before any parameter is touched.
template <typename T>
double training_step(TrainState<T>& st, const Tensor<T>& x0, std::vector<std::int64_t> y) {
  const std::int64_t B = x0.dim(0);
  check_shape(static_cast<std::int64_t>(y.size()) == B, "training_step: one label per sample");
  std::vector<std::int64_t> t(static_cast<std::size_t>(B));
  for (auto& tv : t) tv = st.rng.uniform_int(0, st.schedule.steps);
  auto eps = Tensor<T>::zeros(x0.shape());
  st.rng.fill_normal(std::span<T>(eps.data_mut()));
  if (st.model.cfg.cfg && st.model.cfg.cfg_dropout_prob > 0.0)
    for (auto& yv : y)
      if (st.rng.uniform() < st.model.cfg.cfg_dropout_prob) {
        yv = st.model.cfg.null_label();
        ++st.dropped_labels;
      }
  auto xt = q_sample(st.schedule, x0, t, eps);

  double loss;
  {
    GradTape<T> tape;
    auto loss_t = mse_loss(forward(st.model, xt, t, y), eps);
    loss = static_cast<double>(loss_t.item());
    if (!std::isfinite(loss))
      throw NumericError("training step " + std::to_string(st.step) +
                         ": non-finite loss " + std::to_string(loss));
    tape.backward(loss_t);
  }

  ++st.step;
  const double b1 = st.hp.beta1, b2 = st.hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto params = collect_params(st.model);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& mv = st.adam_m[i].data_mut();
    auto& vv = st.adam_v[i].data_mut();
    const auto& g = p.node()->grad;
    auto& w = p.data_mut();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double m1 = b1 * static_cast<double>(mv[j]) + (1.0 - b1) * gj;
      const double m2 = b2 * static_cast<double>(vv[j]) + (1.0 - b2) * gj * gj;
      mv[j] = static_cast<T>(m1);
      vv[j] = static_cast<T>(m2);
      double upd = st.hp.lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + st.hp.adam_eps);
      if (st.hp.weight_decay > 0.0) upd += st.hp.lr * st.hp.weight_decay * static_cast<double>(w[j]);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
    }
    p.zero_grad();
    if (st.hp.ema) {
      auto& sv = st.ema[i].data_mut();
      const double d = st.hp.ema_decay;
      for (std::size_t j = 0; j < sv.size(); ++j)
        sv[j] = static_cast<T>(d * static_cast<double>(sv[j]) +
                               (1.0 - d) * static_cast<double>(w[j]));
    }
  }
  return loss;
}

}  // namespace udit
