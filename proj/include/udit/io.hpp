#pragma once

// Binary file formats and dataset synthesis. Two container formats, both
// little-endian and fixed-layout:
//
//   latent dataset  "UDLT": header of seven u32 words after the magic
//                   (version, count, channels, height, width, num_classes,
//                   reserved), then count records of [label u32 | c*h*w f32].
//                   File length must match the header arithmetic exactly.
//
//   checkpoint      "UDCK": version u32, config digest u64, step u64, named
//                   entry table (name length + bytes, dtype tag, rank,
//                   extents, payload byte offset), f32 payload, CRC32 of the
//                   payload. Serialization is deterministic, so
//                   save -> load -> save reproduces the bytes.
//
// All writes go through a temp-file-then-rename so a crash never leaves a
// half-written file at the destination path.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "udit/diffusion.hpp"
#include "udit/model.hpp"

namespace udit {

struct LatentDataset {
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::uint32_t> labels;  // one per sample
  std::vector<float> latents;         // count * channels*height*width

  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t sample_numel() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
  std::span<const float> sample(std::int64_t i) const {
    return {latents.data() + i * sample_numel(), static_cast<std::size_t>(sample_numel())};
  }
};

void save_dataset(const std::string& path, const LatentDataset& ds);
LatentDataset load_dataset(const std::string& path);

// Gaussian mixture with one unit-variance component per class; class k's mean
// is constant across elements, evenly spaced over [-spread, spread]. Labels
// cycle round-robin so every class gets an equal share.
LatentDataset make_mixture_dataset(std::int64_t n, std::int64_t classes, std::int64_t c,
                                   std::int64_t h, std::int64_t w, double spread,
                                   std::uint64_t seed);
double mixture_class_mean(std::int64_t k, std::int64_t classes, double spread);

struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t digest = 0;  // UDiTConfig::digest() of the producing run
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> entries;  // serialization order

  const Tensor<float>* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// model parameters under their census names, preceded by a "cfg.fields"
// entry holding the architecture as a flat f32 vector so the checkpoint
// alone can rebuild its model
Checkpoint pack_model(const ModelParams<float>& m, std::uint64_t step);
// model plus a "diffusion.fields" entry ([T, beta_start, beta_end]),
// optimizer moments ("adam.m.*", "adam.v.*") and EMA shadows
Checkpoint pack_train_state(TrainState<float>& st);

// Rebuild the architecture stored in "cfg.fields"; IoError if the entry is
// missing or malformed.
UDiTConfig unpack_config(const Checkpoint& ck);
// Rebuild the schedule stored in "diffusion.fields" (betas round-trip
// through f32). Falls back to the default linear schedule over expected_T
// when the entry is absent; IoError if a stored horizon contradicts it.
NoiseSchedule unpack_schedule(const Checkpoint& ck, std::int64_t expected_T);

// Load parameters into a model built from its own config. A digest mismatch
// is refused unless force; shape or coverage mismatches always fail.
void restore_model(const Checkpoint& ck, ModelParams<float>& m, bool force = false);
// As restore_model, plus moments, EMA shadows and the step counter.
void restore_train_state(const Checkpoint& ck, TrainState<float>& st, bool force = false);

// Binary PPM (P6) visualization: first three channels as RGB (a single
// channel is replicated), min-max normalized jointly over the used channels.
void save_ppm(const std::string& path, std::span<const float> img, std::int64_t c,
              std::int64_t h, std::int64_t w);

std::uint32_t crc32(std::span<const unsigned char> bytes);

}  // namespace udit
