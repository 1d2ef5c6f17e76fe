#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "udit/diffusion.hpp"

using namespace udit;

namespace {

UDiTConfig tiny_config() {
  auto c = udit_t_config();
  c.latent_h = 8;
  c.latent_w = 8;
  return c;
}

// 2-class mixture: class k latents are N(mean_k, 1) with means evenly spread
// in [-spread, spread], constant across all elements.
template <typename T>
void mixture_batch(Rng& rng, std::int64_t B, std::int64_t classes, double spread,
                   const Shape& latent, Tensor<T>& x0, std::vector<std::int64_t>& y) {
  Shape s = latent;
  s.insert(s.begin(), B);
  x0 = Tensor<T>::zeros(s);
  y.resize(static_cast<std::size_t>(B));
  const std::int64_t per = numel_of(latent);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t k = rng.uniform_int(0, classes);
    y[static_cast<std::size_t>(b)] = k;
    const double mean =
        classes == 1 ? 0.0
                     : -spread + 2.0 * spread * static_cast<double>(k) /
                           static_cast<double>(classes - 1);
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i)
      x0.data_mut()[i] = static_cast<T>(mean + rng.normal());
  }
}

}  // namespace

TEST_CASE("linear schedule satisfies the ramp and monotonicity laws") {
  auto ns = NoiseSchedule::linear();
  REQUIRE(ns.steps == 1000);
  CHECK(ns.betas.front() == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(ns.betas.back() == doctest::Approx(2e-2).epsilon(1e-15));
  for (std::size_t t = 0; t < 1000; ++t) {
    CHECK(ns.betas[t] > 0.0);
    CHECK(ns.betas[t] < 1.0);
    if (t > 0) {
      CHECK(ns.betas[t] > ns.betas[t - 1]);
      CHECK(ns.alpha_bars[t] < ns.alpha_bars[t - 1]);
    }
    CHECK(ns.alphas[t] == 1.0 - ns.betas[t]);
  }
  CHECK(ns.alpha_bars[0] == 1.0 - ns.betas[0]);
  // noise dominates by the terminal time
  CHECK(ns.alpha_bars.back() < 0.01);
  CHECK(ns.posterior_var[0] == 0.0);
  CHECK_THROWS_AS(NoiseSchedule::linear(0), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 0.1), ConfigError);
}

TEST_CASE("forward marginal hits both degenerate branches exactly") {
  auto ns = NoiseSchedule::linear();
  Rng rng(3);
  auto x0 = Tensor<double>::randn({2, 3}, rng);
  auto zero = Tensor<double>::zeros({2, 3});
  auto eps = Tensor<double>::randn({2, 3}, rng);

  auto a = q_sample(ns, x0, {100, 700}, zero);
  for (std::int64_t b = 0; b < 2; ++b) {
    const double ca = std::sqrt(ns.alpha_bars[b == 0 ? 100 : 700]);
    for (std::int64_t i = 0; i < 3; ++i)
      CHECK(a.data()[b * 3 + i] == doctest::Approx(ca * x0.data()[b * 3 + i]).epsilon(1e-15));
  }
  auto b = q_sample(ns, zero, {100, 700}, eps);
  for (std::int64_t bi = 0; bi < 2; ++bi) {
    const double ce = std::sqrt(1.0 - ns.alpha_bars[bi == 0 ? 100 : 700]);
    for (std::int64_t i = 0; i < 3; ++i)
      CHECK(b.data()[bi * 3 + i] == doctest::Approx(ce * eps.data()[bi * 3 + i]).epsilon(1e-15));
  }
  CHECK_THROWS_AS(q_sample(ns, x0, {1000, 0}, eps), ConfigError);
  CHECK_THROWS_AS(q_sample(ns, x0, {-1, 0}, eps), ConfigError);
}

TEST_CASE("forward marginal variance matches the closed form") {
  auto ns = NoiseSchedule::linear();
  Rng rng(5);
  const std::int64_t n = 100000;
  for (std::int64_t t : {1, 250, 500, 999}) {
    auto x0 = Tensor<double>::zeros({n, 1});
    auto eps = Tensor<double>::zeros({n, 1});
    rng.fill_normal(std::span<double>(eps.data_mut()));
    auto xt = q_sample(ns, x0, std::vector<std::int64_t>(n, t), eps);
    double mean = 0;
    for (double v : xt.data()) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : xt.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    const double want = 1.0 - ns.alpha_bars[static_cast<std::size_t>(t)];
    CHECK(std::abs(var - want) / want < 0.02);
  }
}

TEST_CASE("substituting the true noise recovers the posterior mean") {
  auto ns = NoiseSchedule::linear();
  Rng rng(7);
  for (std::int64_t t : {1, 77, 500, 999}) {
    auto x0 = Tensor<double>::randn({2, 4}, rng);
    auto eps = Tensor<double>::randn({2, 4}, rng);
    auto xt = q_sample(ns, x0, {t, t}, eps);
    auto mu_model = denoise_mean(ns, xt, eps, t, t - 1);
    auto mu_closed = posterior_mean(ns, x0, xt, t);
    for (std::size_t i = 0; i < mu_model.data().size(); ++i)
      CHECK(mu_model.data()[i] == doctest::Approx(mu_closed.data()[i]).epsilon(1e-10));
  }
}

TEST_CASE("zero predicted noise reduces the step to a rescale") {
  auto ns = NoiseSchedule::linear();
  Rng rng(11);
  auto xt = Tensor<double>::randn({1, 5}, rng);
  auto zero = Tensor<double>::zeros({1, 5});
  auto mu = denoise_mean(ns, xt, zero, 0, -1);
  for (std::int64_t i = 0; i < 5; ++i)
    CHECK(mu.data()[i] == doctest::Approx(xt.data()[i] / std::sqrt(ns.alphas[0])).epsilon(1e-15));
}

TEST_CASE("final reverse step is deterministic and draws no randomness") {
  auto c = tiny_config();
  auto m = build_model<double>(c, 13);
  auto ns = NoiseSchedule::linear(c.timesteps);
  Rng rng(17);
  auto xt = Tensor<double>::randn({2, 4, 8, 8}, rng);
  Rng r1(100), r2(999);
  auto a = p_sample_step(m, ns, xt, 0, -1, {0, 1}, 1.0, r1);
  auto b = p_sample_step(m, ns, xt, 0, -1, {0, 1}, 1.0, r2);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
  // the generator state is untouched by a noise-free step
  Rng fresh(100);
  CHECK(r1.next_u64() == fresh.next_u64());
}

TEST_CASE("respaced timelines are strictly increasing and hit both endpoints") {
  auto t4 = respaced_timesteps(1000, 4);
  CHECK(t4 == std::vector<std::int64_t>{0, 333, 666, 999});
  auto t1 = respaced_timesteps(1000, 1);
  CHECK(t1 == std::vector<std::int64_t>{999});
  auto full = respaced_timesteps(1000, 1000);
  CHECK(static_cast<std::int64_t>(full.size()) == 1000);
  for (std::int64_t k = 0; k < 1000; ++k) CHECK(full[static_cast<std::size_t>(k)] == k);
  CHECK_THROWS_AS(respaced_timesteps(1000, 0), ConfigError);
  CHECK_THROWS_AS(respaced_timesteps(1000, 1001), ConfigError);
}

TEST_CASE("sampling is shape-correct, finite, and seed-deterministic") {
  auto c = tiny_config();
  auto m = build_model<float>(c, 19);
  auto ns = NoiseSchedule::linear(c.timesteps);
  auto s1 = sample(m, ns, 3, {0, 1, 0}, 1.0, 10, 42);
  CHECK(s1.shape() == Shape{3, 4, 8, 8});
  for (float v : s1.data()) CHECK(std::isfinite(v));
  auto s2 = sample(m, ns, 3, {0, 1, 0}, 1.0, 10, 42);
  for (std::size_t i = 0; i < s1.data().size(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
  auto s3 = sample(m, ns, 3, {0, 1, 0}, 1.0, 10, 43);
  bool differs = false;
  for (std::size_t i = 0; i < s1.data().size() && !differs; ++i)
    differs = s1.data()[i] != s3.data()[i];
  CHECK(differs);
}

TEST_CASE("guided sampling at scale 1 equals the conditional-only loop") {
  auto c = tiny_config();
  auto m = build_model<double>(c, 23);
  // nudge the head so the model output is nonzero
  m.w_head.data_mut()[0] = 0.04;
  auto ns = NoiseSchedule::linear(c.timesteps);
  auto guided = sample(m, ns, 2, {0, 1}, 1.0, 8, 77);

  // conditional-only replica of the sampling loop
  auto timeline = respaced_timesteps(ns.steps, 8);
  Rng rng(77);
  auto x = Tensor<double>::zeros({2, 4, 8, 8});
  rng.fill_normal(std::span<double>(x.data_mut()));
  std::vector<std::int64_t> y{0, 1};
  for (std::int64_t k = static_cast<std::int64_t>(timeline.size()) - 1; k >= 0; --k) {
    const std::int64_t t = timeline[static_cast<std::size_t>(k)];
    const std::int64_t t_prev = k > 0 ? timeline[static_cast<std::size_t>(k - 1)] : -1;
    std::vector<std::int64_t> tv(2, t);
    auto eps_hat = forward(m, x, tv, y);
    x = denoise_mean(ns, x, eps_hat, t, t_prev);
    if (t_prev >= 0) {
      const double sigma = std::sqrt(
          (1.0 - ns.alpha_bars[static_cast<std::size_t>(t_prev)]) /
          (1.0 - ns.alpha_bars[static_cast<std::size_t>(t)]) *
          (t_prev == t - 1 ? ns.betas[static_cast<std::size_t>(t)]
                           : 1.0 - ns.alpha_bars[static_cast<std::size_t>(t)] /
                                       ns.alpha_bars[static_cast<std::size_t>(t_prev)]));
      for (auto& v : x.data_mut()) v += sigma * rng.normal();
    }
  }
  for (std::size_t i = 0; i < guided.data().size(); ++i)
    CHECK(guided.data()[i] == x.data()[i]);
}

TEST_CASE("fresh model trains at the unit-noise loss level") {
  auto c = tiny_config();
  auto st = init_train_state<double>(c, NoiseSchedule::linear(c.timesteps), TrainHp{}, 31);
  Rng rng(37);
  Tensor<double> x0;
  std::vector<std::int64_t> y;
  mixture_batch(rng, 64, 2, 1.5, {4, 8, 8}, x0, y);
  // zero-init head predicts 0, so the loss is the mean square of unit noise
  const double loss = training_step(st, x0, y);
  CHECK(std::abs(loss - 1.0) < 0.05);
  CHECK(st.step == 1);
}

TEST_CASE("perfect noise prediction has exactly zero loss") {
  Rng rng(41);
  auto eps = Tensor<double>::randn({4, 16}, rng);
  auto clone = Tensor<double>::from_vector(eps.shape(), eps.data());
  CHECK(mse_loss(clone, eps).item() == 0.0);
}

TEST_CASE("short training run reduces the loss") {
  auto c = tiny_config();
  c.cfg_dropout_prob = 0.1;
  TrainHp hp;
  auto st = init_train_state<float>(c, NoiseSchedule::linear(c.timesteps), hp, 43);
  Rng rng(47);
  double head = 0, tail = 0;
  const int steps = 120, B = 16;
  for (int i = 0; i < steps; ++i) {
    Tensor<float> x0;
    std::vector<std::int64_t> y;
    mixture_batch(rng, B, 2, 1.5, {4, 8, 8}, x0, y);
    const double loss = training_step(st, x0, y);
    if (i < 20) head += loss;
    if (i >= steps - 20) tail += loss;
  }
  CHECK(tail < head);
  CHECK(st.dropped_labels > 0);  // dropout fired at p = 0.1 over 1920 labels
  CHECK(st.dropped_labels < steps * B / 2);
}

TEST_CASE("dropout probability one maps every label to the null row") {
  auto c = tiny_config();
  c.cfg_dropout_prob = 1.0;
  auto st = init_train_state<double>(c, NoiseSchedule::linear(c.timesteps), TrainHp{}, 53);
  Rng rng(59);
  Tensor<double> x0;
  std::vector<std::int64_t> y;
  mixture_batch(rng, 8, 2, 1.5, {4, 8, 8}, x0, y);
  training_step(st, x0, y);
  training_step(st, x0, y);
  CHECK(st.dropped_labels == 16);
}

TEST_CASE("training is bitwise deterministic under a fixed seed") {
  auto run = [](std::uint64_t seed) {
    auto c = tiny_config();
    auto st = init_train_state<double>(c, NoiseSchedule::linear(c.timesteps), TrainHp{}, seed);
    Rng rng(61);
    std::vector<double> losses;
    for (int i = 0; i < 4; ++i) {
      Tensor<double> x0;
      std::vector<std::int64_t> y;
      mixture_batch(rng, 8, 2, 1.5, {4, 8, 8}, x0, y);
      losses.push_back(training_step(st, x0, y));
    }
    return losses;
  };
  auto a = run(71), b = run(71), c = run(72);
  for (int i = 0; i < 4; ++i) CHECK(a[static_cast<std::size_t>(i)] == b[static_cast<std::size_t>(i)]);
  bool differs = false;
  for (int i = 0; i < 4; ++i) differs = differs || a[static_cast<std::size_t>(i)] != c[static_cast<std::size_t>(i)];
  CHECK(differs);
}

TEST_CASE("shadow weights track an exponential moving average") {
  auto c = tiny_config();
  TrainHp hp;
  hp.ema = true;
  hp.ema_decay = 0.9;
  auto st = init_train_state<double>(c, NoiseSchedule::linear(c.timesteps), hp, 73);
  auto before = st.model.w_in.data();            // snapshot
  auto shadow_before = st.ema[0].data();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(shadow_before[i] == before[i]);
  Rng rng(79);
  Tensor<double> x0;
  std::vector<std::int64_t> y;
  mixture_batch(rng, 8, 2, 1.5, {4, 8, 8}, x0, y);
  training_step(st, x0, y);
  const auto& after = st.model.w_in.data();
  const auto& shadow = st.ema[0].data();
  for (std::size_t i = 0; i < after.size(); ++i)
    CHECK(shadow[i] == doctest::Approx(0.9 * before[i] + 0.1 * after[i]).epsilon(1e-12));
}

TEST_CASE("non-finite data aborts the step before touching parameters") {
  auto c = tiny_config();
  auto st = init_train_state<double>(c, NoiseSchedule::linear(c.timesteps), TrainHp{}, 83);
  auto w_before = st.model.w_in.data();
  auto x0 = Tensor<double>::full({2, 4, 8, 8}, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(training_step(st, x0, {0, 1}), NumericError);
  CHECK(st.step == 0);
  for (std::size_t i = 0; i < w_before.size(); ++i)
    CHECK(st.model.w_in.data()[i] == w_before[i]);
}
