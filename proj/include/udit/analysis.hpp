#pragma once

// Analytical parameter and FLOP accounting. Counts one forward pass at batch
// 1 by mirroring the runtime op sequence layer by layer, using the same cost
// conventions as the kernel trace (2 FLOPs per multiply-add, the cost::k*
// factors per element for the rest, zero for data movement). The runtime
// cross-check in verify_against_runtime keeps the two from drifting apart.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "udit/model.hpp"

namespace udit {

struct CostEntry {
  std::string name;
  std::string stage;  // grouping tag: stem / cond / enc0 / enc1 / mid / dec1 / dec0 / head
  std::uint64_t params = 0;
  std::uint64_t madds = 0;            // multiply-add count of the contractions
  std::uint64_t flops = 0;            // 2*madds plus elementwise terms
  std::uint64_t attn_core_flops = 0;  // the two attention contractions only
};

struct CostReport {
  std::string label;
  std::vector<CostEntry> entries;

  std::uint64_t params() const;
  std::uint64_t madds() const;
  std::uint64_t flops() const;
  std::uint64_t attn_core_flops() const;

  // one aggregated entry per stage tag, in first-appearance order
  std::vector<CostEntry> stage_totals() const;
};

// Isotropic (single-resolution) transformer denoiser over a patchified
// latent: patch embed, `depth` identical blocks, modulated output head.
struct IsoDiTConfig {
  std::int64_t hidden = 384;
  std::int64_t depth = 12;
  std::int64_t heads = 6;
  std::int64_t patch = 2;
  std::int64_t latent_channels = 4;
  std::int64_t latent_h = 32;
  std::int64_t latent_w = 32;
  std::int64_t time_freq_dim = 256;
  std::int64_t num_classes = 1000;
  bool predict_sigma = true;

  void validate() const;
};

// FLOPs of the two attention contractions (logits and context) over a
// grid x grid token map with head dimension head_dim. stride 1 attends over
// the full grid; stride 2 folds the map into four independent half-resolution
// sub-grids, which costs exactly a quarter of the full-grid core.
std::uint64_t attention_cost(std::int64_t grid, std::int64_t head_dim, std::int64_t stride);

CostReport count(const UDiTConfig& cfg, std::string label = "udit");
CostReport count(const IsoDiTConfig& cfg, std::string label = "dit");

// line-oriented key=value records, one line per entry plus totals
std::string report_kv(const CostReport& r);

// aligned side-by-side totals table for human reading
std::string compare(const std::vector<CostReport>& reports);

// Agreement between the analytical counter and the instantiated model: the
// per-group weight census must match exactly, and (optionally) the FLOP
// trace of a real batch-1 forward must match within 0.1%.
struct RuntimeCheck {
  struct Row {
    std::string group;
    std::uint64_t analytic = 0;
    std::uint64_t built = 0;
  };
  std::vector<Row> mismatches;
  std::uint64_t analytic_params = 0;
  std::uint64_t built_params = 0;
  std::uint64_t analytic_flops = 0;
  std::uint64_t traced_flops = 0;
  bool traced = false;

  bool params_ok() const { return mismatches.empty() && analytic_params == built_params; }
  double flop_rel_err() const;
  bool flops_ok(double tol = 1e-3) const { return !traced || flop_rel_err() <= tol; }
  bool ok() const { return params_ok() && flops_ok(); }
};

RuntimeCheck verify_against_runtime(const UDiTConfig& cfg, bool trace_flops = true);

// named baseline: hidden 384, depth 12, heads 6, patch 2
IsoDiTConfig dit_s2_config();

// matched pair for the attention-folding ablation: identical U-Nets except
// the first attends over folded sub-grids (stride 2) and the second over the
// full grid (stride 1)
std::pair<UDiTConfig, UDiTConfig> attention_folding_pair();

}  // namespace udit
