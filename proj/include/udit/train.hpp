#pragma once

// Outer training loop shared by the command-line driver and the test
// harnesses: deterministic batch assembly from a dataset, line-oriented
// logging, periodic checkpointing through the atomic writer. Batch indices
// for absolute step s come from a fresh fork keyed by s, so the data order
// is reproducible and survives a resume without replaying history.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "udit/diffusion.hpp"
#include "udit/io.hpp"

namespace udit {

struct TrainRunOptions {
  std::int64_t steps = 0;             // absolute target step count
  std::int64_t batch = 1;
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 0;  // 0: write only at exit
  std::string checkpoint_path;        // empty: never write checkpoints
  std::uint64_t data_seed = 0;        // seeds the batch-index stream
  std::function<void(const std::string&)> log;  // optional line sink
};

struct TrainRunResult {
  std::vector<double> losses;  // one entry per step executed in this call
  std::int64_t checkpoints_written = 0;
};

namespace detail {
constexpr std::uint64_t kBatchSalt = 0xba7c68ull;
}

// Sample indices with replacement for one step, gather the batch.
inline void assemble_batch(const LatentDataset& ds, std::uint64_t data_seed, std::int64_t step,
                           std::int64_t batch, Tensor<float>& x0,
                           std::vector<std::int64_t>& y) {
  Rng rng = Rng(data_seed).fork(detail::kBatchSalt).fork(static_cast<std::uint64_t>(step));
  const std::int64_t numel = ds.sample_numel();
  auto& buf = x0.data_mut();
  y.resize(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t i = rng.uniform_int(0, ds.count());
    const auto s = ds.sample(i);
    std::copy(s.begin(), s.end(), buf.begin() + b * numel);
    y[static_cast<std::size_t>(b)] = ds.labels[static_cast<std::size_t>(i)];
  }
}

inline TrainRunResult run_training(TrainState<float>& st, const LatentDataset& ds,
                                   const TrainRunOptions& opt) {
  const auto& cfg = st.model.cfg;
  if (opt.batch < 1) throw ConfigError("training run: batch must be at least 1");
  if (opt.steps < 0) throw ConfigError("training run: steps must be nonnegative");
  if (opt.log_every < 1) throw ConfigError("training run: log_every must be at least 1");
  if (ds.count() < 1) throw ConfigError("training run: dataset is empty");
  if (static_cast<std::int64_t>(ds.channels) != cfg.latent_channels ||
      static_cast<std::int64_t>(ds.height) != cfg.latent_h ||
      static_cast<std::int64_t>(ds.width) != cfg.latent_w)
    throw ConfigError("training run: dataset latents are " + std::to_string(ds.channels) + "x" +
                      std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                      ", model wants " + std::to_string(cfg.latent_channels) + "x" +
                      std::to_string(cfg.latent_h) + "x" + std::to_string(cfg.latent_w));
  if (static_cast<std::int64_t>(ds.num_classes) > cfg.num_classes)
    throw ConfigError("training run: dataset has " + std::to_string(ds.num_classes) +
                      " classes, model only " + std::to_string(cfg.num_classes));

  TrainRunResult res;
  auto x0 = Tensor<float>::zeros({opt.batch, cfg.latent_channels, cfg.latent_h, cfg.latent_w});
  std::vector<std::int64_t> y;

  auto emit = [&opt](std::int64_t step, double loss, double sps) {
    if (!opt.log) return;
    char line[128];
    std::snprintf(line, sizeof(line), "step=%lld loss=%.6f steps_per_sec=%.2f",
                  static_cast<long long>(step), loss, sps);
    opt.log(line);
  };
  auto save = [&](std::int64_t /*step*/) {
    if (opt.checkpoint_path.empty()) return;
    save_checkpoint(opt.checkpoint_path, pack_train_state(st));
    ++res.checkpoints_written;
  };

  auto window_start = std::chrono::steady_clock::now();
  std::int64_t window_steps = 0;
  while (st.step < opt.steps) {
    assemble_batch(ds, opt.data_seed, st.step, opt.batch, x0, y);
    const double loss = training_step(st, x0, y);  // advances st.step
    res.losses.push_back(loss);
    ++window_steps;
    if (st.step % opt.log_every == 0 || st.step == opt.steps) {
      const auto now = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(now - window_start).count();
      emit(st.step, loss, secs > 0 ? window_steps / secs : 0.0);
      window_start = now;
      window_steps = 0;
    }
    if (opt.checkpoint_every > 0 && st.step % opt.checkpoint_every == 0 &&
        st.step != opt.steps)
      save(st.step);
  }
  save(st.step);
  return res;
}

}  // namespace udit
