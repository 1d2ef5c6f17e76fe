#pragma once

// One JSON file drives a whole run: model architecture, diffusion schedule,
// training loop, data source and sampling defaults. Every unknown key,
// anywhere in the tree, is rejected by name so a typo can never silently fall
// back to a default. The struct initializers below are the defaults.

#include <cstdint>
#include <string>

#include "udit/model.hpp"

namespace udit {

struct RunConfig {
  UDiTConfig model;

  struct Diffusion {
    std::int64_t timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::string schedule = "linear";
    std::string objective = "eps";  // the only supported prediction target
  } diffusion;

  struct Train {
    std::int64_t steps = 1000;
    std::int64_t batch = 64;
    double lr = 1e-4;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    bool ema = false;
    double ema_decay = 0.9999;
    std::int64_t checkpoint_every = 500;  // 0 disables periodic checkpoints
    std::int64_t log_every = 50;
  } train;

  struct Data {
    std::string kind = "synthetic";  // "synthetic" | "latent-file"
    std::string path;                // latent-file source
    std::int64_t synth_n = 4096;
    std::int64_t classes = 2;
    double spread = 1.0;
    std::uint64_t seed = 0;
  } data;

  struct Sample {
    std::int64_t n = 4;
    std::int64_t steps = 50;
    double cfg_scale = 1.0;
    std::int64_t cls = 0;
  } sample;
};

// Parse and validate; ConfigError names the offending key or value. The model
// section's denoising horizon always follows diffusion.timesteps.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace udit
