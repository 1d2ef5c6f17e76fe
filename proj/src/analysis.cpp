#include "udit/analysis.hpp"

#include <iomanip>
#include <map>
#include <sstream>

namespace udit {

namespace {

std::uint64_t u(std::int64_t v) { return static_cast<std::uint64_t>(v); }

// dense projection of `rows` tokens from `in` to `out` features, with bias
void add_linear(CostEntry& e, std::int64_t rows, std::int64_t in, std::int64_t out) {
  e.madds += u(rows) * u(in) * u(out);
  e.flops += 2 * u(rows) * u(in) * u(out) + u(rows) * u(out);
}

void add_el(CostEntry& e, std::int64_t factor, std::int64_t numel) {
  e.flops += u(factor) * u(numel);
}

void add_dwconv(CostEntry& e, std::int64_t numel, std::int64_t taps) {
  e.madds += u(numel) * u(taps);
  e.flops += 2 * u(numel) * u(taps);
}

// One pre-norm adaLN block at batch 1: conditioning projection, modulated
// attention branch, modulated feed-forward branch. `tiles` is the number of
// independently attended sub-grids (stride^2); `f` the feed-forward width.
CostEntry block_cost(std::int64_t ch, std::int64_t emb_dim, std::int64_t heads,
                     std::int64_t tokens, std::int64_t tiles, bool cosine, bool rope,
                     bool dwconv, std::int64_t f) {
  const std::int64_t d = ch / heads;
  const std::int64_t nt = tokens / tiles;
  CostEntry e;
  e.params = u(4 * ch);                            // two affine norms
  e.params += u(ch * 3 * ch + 3 * ch);             // qkv projection
  e.params += u(ch * ch + ch);                     // output projection
  if (cosine) e.params += u(heads);                // per-head log temperature
  e.params += u(ch * f + f) + u(f * ch + ch);      // feed-forward pair
  if (dwconv) e.params += u(9 * f);                // 3x3 depthwise stage
  e.params += u(emb_dim * 6 * ch + 6 * ch);        // adaLN projection

  add_el(e, cost::kSilu, emb_dim);
  add_linear(e, 1, emb_dim, 6 * ch);

  add_el(e, cost::kLayerNorm, tokens * ch);
  add_el(e, cost::kModulate, tokens * ch);
  add_linear(e, tokens, ch, 3 * ch);
  if (rope) add_el(e, cost::kRope, 2 * tokens * ch);
  const std::uint64_t core = 4ull * u(tiles) * u(heads) * u(nt) * u(nt) * u(d);
  if (cosine) {
    add_el(e, cost::kRowNormalize, 2 * tokens * ch);
    add_el(e, cost::kEltwise, 3 * heads);  // negate, exponentiate, cap the temperatures
    add_el(e, cost::kEltwise, tokens * ch);
  } else {
    add_el(e, cost::kEltwise, tiles * heads * nt * nt);  // logit rescale
  }
  e.flops += core;
  e.madds += core / 2;
  e.attn_core_flops += core;
  add_el(e, cost::kSoftmax, tiles * heads * nt * nt);
  add_linear(e, tokens, ch, ch);
  add_el(e, cost::kEltwise, 2 * tokens * ch);  // gate and residual

  add_el(e, cost::kLayerNorm, tokens * ch);
  add_el(e, cost::kModulate, tokens * ch);
  add_linear(e, tokens, ch, f);
  add_el(e, cost::kGelu, tokens * f);
  if (dwconv) {
    add_dwconv(e, tokens * f, 9);
    add_el(e, cost::kEltwise, tokens * f);  // identity branch of the depthwise pair
  }
  add_linear(e, tokens, f, ch);
  add_el(e, cost::kEltwise, 2 * tokens * ch);
  return e;
}

// timestep MLP plus label row lookup, summed
CostEntry embedder_cost(std::int64_t freq_dim, std::int64_t emb_dim, std::int64_t label_rows) {
  CostEntry e;
  e.params = u(freq_dim * emb_dim + emb_dim) + u(emb_dim * emb_dim + emb_dim) +
             u(label_rows * emb_dim);
  add_linear(e, 1, freq_dim, emb_dim);
  add_el(e, cost::kSilu, emb_dim);
  add_linear(e, 1, emb_dim, emb_dim);
  add_el(e, cost::kEltwise, emb_dim);
  return e;
}

constexpr const char* kSegTag[UDiTConfig::kSegments] = {"enc0", "enc1", "mid", "dec1", "dec0"};

}  // namespace

std::uint64_t CostReport::params() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.params;
  return t;
}

std::uint64_t CostReport::madds() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.madds;
  return t;
}

std::uint64_t CostReport::flops() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.flops;
  return t;
}

std::uint64_t CostReport::attn_core_flops() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.attn_core_flops;
  return t;
}

std::vector<CostEntry> CostReport::stage_totals() const {
  std::vector<CostEntry> out;
  for (const auto& e : entries) {
    CostEntry* slot = nullptr;
    for (auto& o : out)
      if (o.stage == e.stage) slot = &o;
    if (!slot) {
      out.push_back(CostEntry{e.stage, e.stage, 0, 0, 0, 0});
      slot = &out.back();
    }
    slot->params += e.params;
    slot->madds += e.madds;
    slot->flops += e.flops;
    slot->attn_core_flops += e.attn_core_flops;
  }
  return out;
}

void IsoDiTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (hidden <= 0 || heads <= 0 || depth < 1 || patch < 1) fail("iso dims must be positive");
  if (hidden % heads != 0)
    fail("hidden " + std::to_string(hidden) + " not divisible by heads " +
         std::to_string(heads));
  if (latent_channels <= 0) fail("latent_channels must be positive");
  if (latent_h % patch != 0 || latent_w % patch != 0)
    fail("latent " + std::to_string(latent_h) + "x" + std::to_string(latent_w) +
         " not divisible by patch " + std::to_string(patch));
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0)
    fail("time_freq_dim must be a positive even number");
  if (num_classes < 1) fail("num_classes must be at least 1");
}

std::uint64_t attention_cost(std::int64_t grid, std::int64_t head_dim, std::int64_t stride) {
  if (grid < 1 || head_dim < 1)
    throw ConfigError("attention_cost: grid and head_dim must be positive");
  if (stride != 1 && stride != 2)
    throw ConfigError("attention_cost: stride must be 1 or 2, got " + std::to_string(stride));
  if (stride == 2 && grid % 2 != 0)
    throw ShapeError("attention_cost: stride-2 folding needs an even grid, got " +
                     std::to_string(grid));
  const std::uint64_t tiles = u(stride) * u(stride);
  const std::uint64_t tokens = u(grid / stride) * u(grid / stride);
  return 2ull * 2ull * tiles * tokens * tokens * u(head_dim);
}

CostReport count(const UDiTConfig& cfg, std::string label) {
  cfg.validate();
  CostReport r;
  r.label = std::move(label);
  const std::int64_t n0 = cfg.latent_h * cfg.latent_w;

  CostEntry in;
  in.name = "in";
  in.stage = "stem";
  in.params = u(cfg.latent_channels * cfg.base_channels + cfg.base_channels);
  add_linear(in, n0, cfg.latent_channels, cfg.base_channels);
  r.entries.push_back(in);

  for (std::int64_t s = 0; s < UDiTConfig::kSegments; ++s) {
    auto e = embedder_cost(cfg.time_freq_dim, cfg.stage_emb(UDiTConfig::stage_of(s)),
                           cfg.label_rows());
    e.name = "emb" + std::to_string(s);
    e.stage = "cond";
    r.entries.push_back(e);
  }

  auto push_segment = [&](std::int64_t s) {
    const std::int64_t k = UDiTConfig::stage_of(s);
    const std::int64_t stride = cfg.attn_stride[static_cast<std::size_t>(k)];
    for (std::int64_t i = 0; i < cfg.depths[static_cast<std::size_t>(s)]; ++i) {
      auto e = block_cost(cfg.stage_channels(k), cfg.stage_emb(k), cfg.stage_heads(k),
                          cfg.stage_h(k) * cfg.stage_w(k), stride * stride, cfg.cosine,
                          cfg.rope, cfg.dwconv_ffn, cfg.ffn_ratio * cfg.stage_channels(k));
      e.name = "seg" + std::to_string(s) + ".blk" + std::to_string(i);
      e.stage = kSegTag[s];
      r.entries.push_back(e);
    }
  };

  auto push_down = [&](std::int64_t k) {
    const std::int64_t c = cfg.stage_channels(k);
    const std::int64_t n = cfg.stage_h(k) * cfg.stage_w(k);
    CostEntry e;
    e.name = "down" + std::to_string(k);
    e.stage = kSegTag[k];
    e.params = u(9 * c) + u(4 * c * 2 * c + 2 * c);
    add_dwconv(e, n * c, 9);
    add_el(e, cost::kEltwise, n * c);  // identity branch
    add_linear(e, n / 4, 4 * c, 2 * c);
    r.entries.push_back(e);
  };

  auto push_up = [&](std::int64_t k) {
    const std::int64_t c2 = cfg.stage_channels(k + 1);  // incoming width
    const std::int64_t n2 = cfg.stage_h(k + 1) * cfg.stage_w(k + 1);
    CostEntry e;
    e.name = "up" + std::to_string(k);
    e.stage = kSegTag[4 - k];
    e.params = u(c2 * 2 * c2 + 2 * c2) + u(c2 * (c2 / 2) + c2 / 2);
    add_linear(e, n2, c2, 2 * c2);
    add_linear(e, 4 * n2, 2 * (c2 / 2), c2 / 2);
    r.entries.push_back(e);
  };

  push_segment(0);
  push_down(0);
  push_segment(1);
  push_down(1);
  push_segment(2);
  push_up(1);
  push_segment(3);
  push_up(0);
  push_segment(4);

  CostEntry head;
  head.name = "head";
  head.stage = "head";
  head.params = u(cfg.base_channels * cfg.out_channels() + cfg.out_channels());
  add_linear(head, n0, cfg.base_channels, cfg.out_channels());
  r.entries.push_back(head);
  return r;
}

CostReport count(const IsoDiTConfig& cfg, std::string label) {
  cfg.validate();
  CostReport r;
  r.label = std::move(label);
  const std::int64_t n = (cfg.latent_h / cfg.patch) * (cfg.latent_w / cfg.patch);
  const std::int64_t in_dim = cfg.latent_channels * cfg.patch * cfg.patch;
  const std::int64_t out_dim = in_dim * (cfg.predict_sigma ? 2 : 1);

  CostEntry pe;
  pe.name = "patchify";
  pe.stage = "stem";
  pe.params = u(in_dim * cfg.hidden + cfg.hidden);
  add_linear(pe, n, in_dim, cfg.hidden);
  r.entries.push_back(pe);

  auto cond = embedder_cost(cfg.time_freq_dim, cfg.hidden, cfg.num_classes + 1);
  cond.name = "cond";
  cond.stage = "cond";
  r.entries.push_back(cond);

  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    auto e = block_cost(cfg.hidden, cfg.hidden, cfg.heads, n, 1, false, false, false,
                        4 * cfg.hidden);
    e.name = "blk" + std::to_string(i);
    e.stage = "body";
    r.entries.push_back(e);
  }

  // modulated output head: shift/scale projection, norm, final linear
  CostEntry fin;
  fin.name = "final";
  fin.stage = "head";
  fin.params = u(cfg.hidden * 2 * cfg.hidden + 2 * cfg.hidden) +
               u(cfg.hidden * out_dim + out_dim);
  add_el(fin, cost::kSilu, cfg.hidden);
  add_linear(fin, 1, cfg.hidden, 2 * cfg.hidden);
  add_el(fin, cost::kLayerNorm, n * cfg.hidden);
  add_el(fin, cost::kModulate, n * cfg.hidden);
  add_linear(fin, n, cfg.hidden, out_dim);
  r.entries.push_back(fin);
  return r;
}

std::string report_kv(const CostReport& r) {
  std::ostringstream os;
  for (const auto& e : r.entries)
    os << "entry=" << e.name << " stage=" << e.stage << " params=" << e.params
       << " madds=" << e.madds << " flops=" << e.flops
       << " attn_core_flops=" << e.attn_core_flops << "\n";
  os << "total label=" << r.label << " params=" << r.params() << " madds=" << r.madds()
     << " flops=" << r.flops() << " attn_core_flops=" << r.attn_core_flops() << "\n";
  return os.str();
}

std::string compare(const std::vector<CostReport>& reports) {
  auto giga = [](std::uint64_t v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << static_cast<double>(v) / 1e9;
    return os.str();
  };
  auto mega = [](std::uint64_t v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << static_cast<double>(v) / 1e6;
    return os.str();
  };
  std::vector<std::array<std::string, 6>> rows;
  rows.push_back({"model", "params(M)", "madds(G)", "flops(G)", "attn core(G)", "core share"});
  for (const auto& r : reports) {
    std::ostringstream share;
    share << std::fixed << std::setprecision(3)
          << (r.flops() ? static_cast<double>(r.attn_core_flops()) /
                              static_cast<double>(r.flops())
                        : 0.0);
    rows.push_back({r.label, mega(r.params()), giga(r.madds()), giga(r.flops()),
                    giga(r.attn_core_flops()), share.str()});
  }
  std::array<std::size_t, 6> width{};
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c)
      os << (c ? "  " : "") << std::setw(static_cast<int>(width[c]))
         << (c ? std::right : std::left) << row[c];
    os << "\n";
  }
  return os.str();
}

double RuntimeCheck::flop_rel_err() const {
  if (!traced) return 0.0;
  if (traced_flops == 0) return analytic_flops == 0 ? 0.0 : 1.0;
  const double a = static_cast<double>(analytic_flops);
  const double t = static_cast<double>(traced_flops);
  return std::abs(a - t) / t;
}

namespace {

// census name -> report entry name: block leaves keep two components,
// everything else collapses to the first
std::string group_of(const std::string& name) {
  const std::size_t first = name.find('.');
  if (name.rfind("seg", 0) != 0) return name.substr(0, first);
  const std::size_t second = name.find('.', first + 1);
  return name.substr(0, second);
}

}  // namespace

RuntimeCheck verify_against_runtime(const UDiTConfig& cfg, bool trace_flops) {
  RuntimeCheck v;
  const auto rep = count(cfg);
  std::map<std::string, std::uint64_t> analytic, built;
  for (const auto& e : rep.entries) analytic[e.name] += e.params;
  for (const auto& slot : param_slots(cfg))
    built[group_of(slot.name)] += u(numel_of(slot.shape));
  for (const auto& [g, n] : analytic) {
    v.analytic_params += n;
    const auto it = built.find(g);
    const std::uint64_t b = it == built.end() ? 0 : it->second;
    if (b != n) v.mismatches.push_back({g, n, b});
  }
  for (const auto& [g, n] : built) {
    v.built_params += n;
    if (analytic.find(g) == analytic.end()) v.mismatches.push_back({g, 0, n});
  }
  v.analytic_flops = rep.flops();
  if (trace_flops) {
    v.traced = true;
    auto m = build_model<float>(cfg, 0x5eed);
    auto x = Tensor<float>::zeros({1, cfg.latent_channels, cfg.latent_h, cfg.latent_w});
    FlopTrace tr;
    forward(m, x, {0}, {0});
    v.traced_flops = tr.flops();
  }
  return v;
}

IsoDiTConfig dit_s2_config() { return IsoDiTConfig{}; }

std::pair<UDiTConfig, UDiTConfig> attention_folding_pair() {
  UDiTConfig folded;
  folded.base_channels = 48;
  folded.heads = 2;
  UDiTConfig full = folded;
  full.attn_stride = {1, 1, 1};
  return {folded, full};
}

}  // namespace udit
