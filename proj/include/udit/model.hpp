#pragma once

// Full denoiser assembly: a three-stage encoder/decoder U-Net of adaLN
// transformer blocks over an unpatchified latent, with per-segment timestep
// and label embedders. Channels double and heads double at each deeper stage
// (constant head dim); decoder stages fuse skip features from their mirror
// encoder stage.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "udit/blocks.hpp"
#include "udit/rng.hpp"

namespace udit {

struct UDiTConfig {
  static constexpr std::int64_t kStages = 3;
  static constexpr std::int64_t kSegments = 5;  // enc0, enc1, mid, dec1, dec0

  std::int64_t base_channels = 96;
  std::int64_t heads = 4;
  std::array<std::int64_t, kSegments> depths{2, 5, 8, 5, 2};
  std::int64_t latent_channels = 4;
  std::int64_t latent_h = 32;
  std::int64_t latent_w = 32;
  std::int64_t num_classes = 1000;
  std::int64_t timesteps = 1000;
  std::int64_t emb_ratio = 3;  // stage embedding dim = emb_ratio * stage channels
  std::int64_t ffn_ratio = 4;
  std::int64_t time_freq_dim = 256;
  bool predict_sigma = false;
  bool cosine = true;
  bool rope = true;
  bool dwconv_ffn = true;
  bool cfg = true;  // reserve a null label row for classifier-free guidance
  double cfg_dropout_prob = 0.1;
  std::array<std::int64_t, kStages> attn_stride{2, 2, 2};

  // segment k lives at stage 0,1,2,1,0
  static std::int64_t stage_of(std::int64_t seg) { return seg < kStages ? seg : 4 - seg; }
  std::int64_t stage_channels(std::int64_t stage) const { return base_channels << stage; }
  std::int64_t stage_heads(std::int64_t stage) const { return heads << stage; }
  std::int64_t stage_emb(std::int64_t stage) const { return emb_ratio * stage_channels(stage); }
  std::int64_t head_dim() const { return base_channels / heads; }
  std::int64_t label_rows() const { return num_classes + (cfg ? 1 : 0); }
  std::int64_t null_label() const { return num_classes; }
  std::int64_t out_channels() const { return latent_channels * (predict_sigma ? 2 : 1); }
  std::int64_t stage_h(std::int64_t stage) const { return latent_h >> stage; }
  std::int64_t stage_w(std::int64_t stage) const { return latent_w >> stage; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (base_channels <= 0 || heads <= 0) fail("base_channels and heads must be positive");
    if (base_channels % heads != 0)
      fail("base_channels " + std::to_string(base_channels) + " not divisible by heads " +
           std::to_string(heads));
    if (rope && head_dim() % 4 != 0)
      fail("rotary offsets need head_dim divisible by 4, got " + std::to_string(head_dim()));
    for (auto d : depths)
      if (d < 1) fail("every segment needs at least one block");
    if (latent_channels <= 0) fail("latent_channels must be positive");
    if (latent_h % 4 != 0 || latent_w % 4 != 0)
      fail("latent extents must be divisible by 4 for two stage transitions, got " +
           std::to_string(latent_h) + "x" + std::to_string(latent_w));
    for (std::int64_t k = 0; k < kStages; ++k) {
      if (attn_stride[static_cast<std::size_t>(k)] != 1 &&
          attn_stride[static_cast<std::size_t>(k)] != 2)
        fail("attention stride must be 1 or 2");
      if (attn_stride[static_cast<std::size_t>(k)] == 2 &&
          (stage_h(k) % 2 != 0 || stage_w(k) % 2 != 0))
        fail("stage " + std::to_string(k) + " grid " + std::to_string(stage_h(k)) + "x" +
             std::to_string(stage_w(k)) + " is odd; stride-2 attention needs even extents");
    }
    if (num_classes < 1) fail("num_classes must be at least 1");
    if (timesteps < 1) fail("timesteps must be at least 1");
    if (emb_ratio < 1 || ffn_ratio < 1) fail("embedding and ffn ratios must be at least 1");
    if (time_freq_dim < 2 || time_freq_dim % 2 != 0)
      fail("time_freq_dim must be a positive even number");
    if (cfg_dropout_prob < 0.0 || cfg_dropout_prob > 1.0)
      fail("cfg_dropout_prob must lie in [0, 1]");
  }

  // Stable fingerprint of every architectural field, used to refuse loading a
  // checkpoint into a mismatched model.
  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 0x100000001b3ull;
    };
    mix(static_cast<std::uint64_t>(base_channels));
    mix(static_cast<std::uint64_t>(heads));
    for (auto d : depths) mix(static_cast<std::uint64_t>(d));
    mix(static_cast<std::uint64_t>(latent_channels));
    mix(static_cast<std::uint64_t>(latent_h));
    mix(static_cast<std::uint64_t>(latent_w));
    mix(static_cast<std::uint64_t>(num_classes));
    mix(static_cast<std::uint64_t>(timesteps));
    mix(static_cast<std::uint64_t>(emb_ratio));
    mix(static_cast<std::uint64_t>(ffn_ratio));
    mix(static_cast<std::uint64_t>(time_freq_dim));
    mix(predict_sigma ? 1 : 0);
    mix(cosine ? 2 : 0);
    mix(rope ? 4 : 0);
    mix(dwconv_ffn ? 8 : 0);
    mix(cfg ? 16 : 0);
    mix(static_cast<std::uint64_t>(cfg_dropout_prob * 1e6));
    for (auto s : attn_stride) mix(static_cast<std::uint64_t>(s));
    return h;
  }
};

template <typename T>
struct Embedder {
  Tensor<T> t_w1, t_b1, t_w2, t_b2;  // sinusoidal features -> e -> silu -> e
  Tensor<T> label_table;             // (label_rows, e)
};

template <typename T>
struct ModelParams {
  UDiTConfig cfg;
  Tensor<T> w_in, b_in;
  std::array<Embedder<T>, UDiTConfig::kSegments> embedders;
  std::array<std::vector<BlockParams<T>>, UDiTConfig::kSegments> segments;
  std::array<EncoderTransitionParams<T>, 2> enc_trans;
  std::array<DecoderTransitionParams<T>, 2> dec_trans;  // [0] fuses skip0, [1] fuses skip1
  Tensor<T> w_head, b_head;
  mutable std::int64_t forward_calls = 0;

  // Empty structure with sized block vectors and no tensor storage.
  static ModelParams shell(const UDiTConfig& c) {
    c.validate();
    ModelParams m;
    m.cfg = c;
    for (std::int64_t s = 0; s < UDiTConfig::kSegments; ++s)
      m.segments[static_cast<std::size_t>(s)].resize(
          static_cast<std::size_t>(c.depths[static_cast<std::size_t>(s)]));
    return m;
  }
};

struct SlotInit {
  enum class Kind { trunc_normal, zero, one, constant };
  Kind kind = Kind::trunc_normal;
  double value = 0.0;
};

// Enumerate every parameter slot with its name, shape, and initializer, in the
// fixed order shared by builder, checkpoints, optimizer state, and the shape
// census. The visitor may leave slots untouched (shape-only walks).
template <typename T, typename F>
void visit_params(ModelParams<T>& m, F&& fn) {
  const UDiTConfig& c = m.cfg;
  const SlotInit tn{SlotInit::Kind::trunc_normal, 0.0};
  const SlotInit zero{SlotInit::Kind::zero, 0.0};
  const SlotInit one{SlotInit::Kind::one, 0.0};
  const SlotInit tau0{SlotInit::Kind::constant, std::log(0.1)};

  fn("in.w", m.w_in, Shape{c.latent_channels, c.base_channels}, tn);
  fn("in.b", m.b_in, Shape{c.base_channels}, zero);

  for (std::int64_t s = 0; s < UDiTConfig::kSegments; ++s) {
    const std::int64_t e = c.stage_emb(UDiTConfig::stage_of(s));
    auto& em = m.embedders[static_cast<std::size_t>(s)];
    const std::string p = "emb" + std::to_string(s) + ".";
    fn(p + "time.w1", em.t_w1, Shape{c.time_freq_dim, e}, tn);
    fn(p + "time.b1", em.t_b1, Shape{e}, zero);
    fn(p + "time.w2", em.t_w2, Shape{e, e}, tn);
    fn(p + "time.b2", em.t_b2, Shape{e}, zero);
    fn(p + "label.table", em.label_table, Shape{c.label_rows(), e}, tn);
  }

  auto visit_segment = [&](std::int64_t s) {
    const std::int64_t stage = UDiTConfig::stage_of(s);
    const std::int64_t ch = c.stage_channels(stage);
    const std::int64_t heads = c.stage_heads(stage);
    const std::int64_t e = c.stage_emb(stage);
    const std::int64_t f = c.ffn_ratio * ch;
    auto& blocks = m.segments[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      b.attn.heads = heads;
      b.attn.downsample = c.attn_stride[static_cast<std::size_t>(stage)];
      b.attn.cosine = c.cosine;
      b.attn.rope = c.rope;
      b.ffn.merged = false;
      const std::string p = "seg" + std::to_string(s) + ".blk" + std::to_string(i) + ".";
      fn(p + "norm1.gain", b.norm1_gain, Shape{ch}, one);
      fn(p + "norm1.bias", b.norm1_bias, Shape{ch}, zero);
      fn(p + "norm2.gain", b.norm2_gain, Shape{ch}, one);
      fn(p + "norm2.bias", b.norm2_bias, Shape{ch}, zero);
      fn(p + "attn.w_qkv", b.attn.w_qkv, Shape{ch, 3 * ch}, tn);
      fn(p + "attn.b_qkv", b.attn.b_qkv, Shape{3 * ch}, zero);
      fn(p + "attn.w_out", b.attn.w_out, Shape{ch, ch}, tn);
      fn(p + "attn.b_out", b.attn.b_out, Shape{ch}, zero);
      if (c.cosine) fn(p + "attn.log_tau", b.attn.log_tau, Shape{heads}, tau0);
      fn(p + "ffn.w1", b.ffn.w1, Shape{ch, f}, tn);
      fn(p + "ffn.b1", b.ffn.b1, Shape{f}, zero);
      if (c.dwconv_ffn) fn(p + "ffn.dw", b.ffn.dw, Shape{f, 1, 3, 3}, tn);
      fn(p + "ffn.w2", b.ffn.w2, Shape{f, ch}, tn);
      fn(p + "ffn.b2", b.ffn.b2, Shape{ch}, zero);
      fn(p + "ada.w", b.w_ada, Shape{e, 6 * ch}, zero);
      fn(p + "ada.b", b.b_ada, Shape{6 * ch}, zero);
    }
  };

  auto visit_down = [&](std::int64_t k) {
    const std::int64_t ch = c.stage_channels(k);
    auto& t = m.enc_trans[static_cast<std::size_t>(k)];
    const std::string p = "down" + std::to_string(k) + ".";
    fn(p + "dw", t.dw, Shape{ch, 1, 3, 3}, tn);
    fn(p + "lift.w", t.w_lift, Shape{4 * ch, 2 * ch}, tn);
    fn(p + "lift.b", t.b_lift, Shape{2 * ch}, zero);
  };

  auto visit_up = [&](std::int64_t k) {
    // consumes stage k+1 features, emits stage k
    const std::int64_t c2 = c.stage_channels(k + 1);
    auto& t = m.dec_trans[static_cast<std::size_t>(k)];
    const std::string p = "up" + std::to_string(k) + ".";
    fn(p + "up.w", t.w_up, Shape{c2, 2 * c2}, tn);
    fn(p + "up.b", t.b_up, Shape{2 * c2}, zero);
    fn(p + "fuse.w", t.w_fuse, Shape{c2, c2 / 2}, tn);
    fn(p + "fuse.b", t.b_fuse, Shape{c2 / 2}, zero);
  };

  visit_segment(0);
  visit_down(0);
  visit_segment(1);
  visit_down(1);
  visit_segment(2);
  visit_up(1);
  visit_segment(3);
  visit_up(0);
  visit_segment(4);

  fn("head.w", m.w_head, Shape{c.base_channels, c.out_channels()}, zero);
  fn("head.b", m.b_head, Shape{c.out_channels()}, zero);
}

// Deterministic initialization: truncated normal(0, 0.02, cut at 2 sigma) for
// weights, zeros for biases and all gating/output layers, ones for norm gains.
template <typename T>
ModelParams<T> build_model(const UDiTConfig& c, std::uint64_t seed) {
  auto m = ModelParams<T>::shell(c);
  Rng rng(seed);
  visit_params(m, [&rng](const std::string&, Tensor<T>& slot, const Shape& shape, SlotInit init) {
    switch (init.kind) {
      case SlotInit::Kind::trunc_normal: {
        slot = Tensor<T>::zeros(shape);
        rng.fill_truncated_normal(std::span<T>(slot.data_mut()), 0.02, 0.04);
        break;
      }
      case SlotInit::Kind::zero:
        slot = Tensor<T>::zeros(shape);
        break;
      case SlotInit::Kind::one:
        slot = Tensor<T>::full(shape, T(1));
        break;
      case SlotInit::Kind::constant:
        slot = Tensor<T>::full(shape, static_cast<T>(init.value));
        break;
    }
  });
  return m;
}

struct ParamSlot {
  std::string name;
  Shape shape;
};

// Shape census without allocating any parameter storage.
inline std::vector<ParamSlot> param_slots(const UDiTConfig& c) {
  auto shell = ModelParams<float>::shell(c);
  std::vector<ParamSlot> out;
  visit_params(shell, [&out](const std::string& name, Tensor<float>&, const Shape& shape,
                             SlotInit) { out.push_back({name, shape}); });
  return out;
}

inline std::int64_t param_count(const UDiTConfig& c) {
  std::int64_t total = 0;
  for (const auto& s : param_slots(c)) total += numel_of(s.shape);
  return total;
}

// Sinusoidal timestep features: [cos(t * w_i) | sin(t * w_i)] with geometric
// frequencies, one row per batch element.
template <typename T>
Tensor<T> timestep_features(const std::vector<std::int64_t>& t, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  const std::int64_t B = static_cast<std::int64_t>(t.size());
  auto out = Tensor<T>::zeros({B, dim});
  auto& v = out.data_mut();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[static_cast<std::size_t>(b)]) * freq;
      v[b * dim + i] = static_cast<T>(std::cos(arg));
      v[b * dim + half + i] = static_cast<T>(std::sin(arg));
    }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> segment_embedding(const ModelParams<T>& m, std::int64_t seg,
                            const std::vector<std::int64_t>& t,
                            const std::vector<std::int64_t>& y) {
  const auto& em = m.embedders[static_cast<std::size_t>(seg)];
  auto feats = timestep_features<T>(t, m.cfg.time_freq_dim);
  auto te = linear(silu(linear(feats, em.t_w1, em.t_b1)), em.t_w2, em.t_b2);
  auto ye = embedding(em.label_table, y);
  return add(te, ye);
}

template <typename T>
void validate_forward_args(const ModelParams<T>& m, const Tensor<T>& x,
                           const std::vector<std::int64_t>& t,
                           const std::vector<std::int64_t>& y) {
  const auto& c = m.cfg;
  check_shape(x.rank() == 4 && x.dim(1) == c.latent_channels && x.dim(2) == c.latent_h &&
                  x.dim(3) == c.latent_w,
              "forward: latent " + shape_str(x.shape()) + " does not match configured (" +
                  std::to_string(c.latent_channels) + "," + std::to_string(c.latent_h) + "," +
                  std::to_string(c.latent_w) + ")");
  check_shape(static_cast<std::int64_t>(t.size()) == x.dim(0) &&
                  static_cast<std::int64_t>(y.size()) == x.dim(0),
              "forward: need one timestep and one label per batch element");
  for (auto tv : t)
    if (tv < 0 || tv >= c.timesteps)
      throw ConfigError("forward: timestep " + std::to_string(tv) + " outside [0, " +
                        std::to_string(c.timesteps) + ")");
  const std::int64_t max_label = c.cfg ? c.num_classes : c.num_classes - 1;
  for (auto yv : y)
    if (yv < 0 || yv > max_label)
      throw ConfigError("forward: label " + std::to_string(yv) + " outside [0, " +
                        std::to_string(max_label) + "]");
}

}  // namespace detail

// Predict noise for a batch of latents at integer timesteps with class labels.
// Label num_classes is the unconditional row (when enabled).
template <typename T>
Tensor<T> forward(const ModelParams<T>& m, const Tensor<T>& x, const std::vector<std::int64_t>& t,
                  const std::vector<std::int64_t>& y) {
  detail::validate_forward_args(m, x, t, y);
  ++m.forward_calls;
  const auto& c = m.cfg;
  const std::int64_t h0 = c.latent_h, w0 = c.latent_w;

  std::array<Tensor<T>, UDiTConfig::kSegments> emb;
  for (std::int64_t s = 0; s < UDiTConfig::kSegments; ++s)
    emb[static_cast<std::size_t>(s)] = detail::segment_embedding(m, s, t, y);

  auto run_segment = [&](Tensor<T> h, std::int64_t s) {
    for (const auto& blk : m.segments[static_cast<std::size_t>(s)])
      h = udit_block(h, emb[static_cast<std::size_t>(s)], blk);
    return h;
  };

  auto h = tokens_to_map(linear(map_to_tokens(x), m.w_in, m.b_in), h0, w0);
  auto skip0 = run_segment(h, 0);
  auto h1 = encoder_transition(skip0, m.enc_trans[0]);
  auto skip1 = run_segment(h1, 1);
  auto h2 = encoder_transition(skip1, m.enc_trans[1]);
  h2 = run_segment(h2, 2);
  auto d1 = run_segment(decoder_transition(h2, skip1, m.dec_trans[1]), 3);
  auto d0 = run_segment(decoder_transition(d1, skip0, m.dec_trans[0]), 4);
  return tokens_to_map(linear(map_to_tokens(d0), m.w_head, m.b_head), h0, w0);
}

// Classifier-free guided prediction: eps_uncond + w * (eps_cond - eps_uncond).
// w == 1 short-circuits to the conditional pass so guided and unguided
// sampling agree bit-for-bit there.
template <typename T>
Tensor<T> forward_cfg(const ModelParams<T>& m, const Tensor<T>& x,
                      const std::vector<std::int64_t>& t, const std::vector<std::int64_t>& y,
                      double w) {
  if (!m.cfg.cfg)
    throw ConfigError("forward_cfg: model was built without a null label row");
  if (w == 1.0) return forward(m, x, t, y);
  auto eps_c = forward(m, x, t, y);
  std::vector<std::int64_t> null_y(y.size(), m.cfg.null_label());
  auto eps_u = forward(m, x, t, null_y);
  return add(eps_u, scale(sub(eps_c, eps_u), static_cast<T>(w)));
}

inline UDiTConfig udit_s_config() { return UDiTConfig{}; }

inline UDiTConfig udit_b_config() {
  UDiTConfig c;
  c.base_channels = 192;
  c.heads = 8;
  return c;
}

inline UDiTConfig udit_l_config() {
  UDiTConfig c;
  c.base_channels = 384;
  c.heads = 16;
  return c;
}

// Desk-scale test configuration.
inline UDiTConfig udit_t_config() {
  UDiTConfig c;
  c.base_channels = 32;
  c.heads = 2;
  c.depths = {1, 1, 2, 1, 1};
  c.num_classes = 2;
  return c;
}

}  // namespace udit
