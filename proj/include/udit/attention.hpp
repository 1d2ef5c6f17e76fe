#pragma once

// Multi-head self-attention over feature maps, with an optional lossless
// token-downsampled path: the QKV map is regrouped into four half-resolution
// sub-features folded into the batch axis, each sub-feature attends within
// itself, and the outputs are regrouped back to full resolution. Cosine
// similarity logits (learnable per-head temperature) and 2D rotary position
// offsets are optional modifications.

#include <cmath>

#include "udit/tensor.hpp"

namespace udit {

constexpr double kCosineEps = 1e-8;
constexpr double kInvTauCap = 100.0;
constexpr double kRopeBase = 10000.0;

template <typename T>
struct AttentionParams {
  std::int64_t heads = 1;
  std::int64_t downsample = 1;  // 1 = full grid, 2 = four folded sub-grids
  bool cosine = true;
  bool rope = true;
  Tensor<T> w_qkv, b_qkv;  // (c,3c), (3c)
  Tensor<T> w_out, b_out;  // (c,c), (c)
  Tensor<T> log_tau;       // (heads); temperature is exp(log_tau), applied as 1/tau

  std::int64_t channels() const { return w_out.dim(0); }
  std::int64_t head_dim() const { return channels() / heads; }
};

// Per-token rotation tables for one (h, w) grid. The first half of each head's
// channels rotates by x-position angles, the second half by y-position angles,
// in standard paired-channel fashion. Requires head_dim % 4 == 0 so both
// halves split into pairs.
template <typename T>
struct Rope2DTable {
  Tensor<T> cos_t, sin_t;  // (h*w, head_dim/2)

  static Rope2DTable build(std::int64_t h, std::int64_t w, std::int64_t head_dim,
                           double base = kRopeBase) {
    check_shape(head_dim % 4 == 0, "rope2d: head_dim must be divisible by 4, got " +
                                       std::to_string(head_dim));
    const std::int64_t pairs_per_axis = head_dim / 4;
    const std::int64_t half = head_dim / 2;
    Rope2DTable t;
    t.cos_t = Tensor<T>::zeros({h * w, half});
    t.sin_t = Tensor<T>::zeros({h * w, half});
    auto& cv = t.cos_t.data_mut();
    auto& sv = t.sin_t.data_mut();
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t n = y * w + x;
        for (std::int64_t p = 0; p < pairs_per_axis; ++p) {
          const double freq = std::pow(base, -2.0 * static_cast<double>(p) /
                                                 static_cast<double>(half));
          const double ax = static_cast<double>(x) * freq;
          const double ay = static_cast<double>(y) * freq;
          cv[n * half + p] = static_cast<T>(std::cos(ax));
          sv[n * half + p] = static_cast<T>(std::sin(ax));
          cv[n * half + pairs_per_axis + p] = static_cast<T>(std::cos(ay));
          sv[n * half + pairs_per_axis + p] = static_cast<T>(std::sin(ay));
        }
      }
    return t;
  }
};

// (B,N,C) tokens -> (B,C,h,w) map and back. Token order is row-major (y*w+x).
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& t, std::int64_t h, std::int64_t w) {
  check_shape(t.rank() == 3 && t.dim(1) == h * w,
              "tokens_to_map: " + shape_str(t.shape()) + " does not cover " +
                  std::to_string(h) + "x" + std::to_string(w));
  return reshape(transpose(t, 1, 2), {t.dim(0), t.dim(2), h, w});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& m) {
  check_shape(m.rank() == 4, "map_to_tokens: want rank-4, got " + shape_str(m.shape()));
  return transpose(reshape(m, {m.dim(0), m.dim(1), m.dim(2) * m.dim(3)}), 1, 2);
}

// Cosine-similarity logits: logit(i,j) = (q_i . k_j) / (|q_i| |k_j| tau), with
// eps in the norm denominators and 1/tau capped. q,k: (G,N,D), G = batch*heads,
// log_tau: (heads).
template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& log_tau) {
  auto qn = row_l2_normalize(q, static_cast<T>(kCosineEps));
  auto kn = row_l2_normalize(k, static_cast<T>(kCosineEps));
  auto inv_tau = clamp_max(udit::exp(neg(log_tau)), static_cast<T>(kInvTauCap));
  auto qs = scale_per_head(qn, inv_tau);
  return matmul(qs, transpose(kn, 1, 2));
}

namespace detail {

// Head-folded attention on a token tile. qkv: (B',N,3C), grid (gh,gw) gives
// token positions for the rotary tables. Returns (B',N,C), before the output
// projection.
template <typename T>
Tensor<T> attend_tokens(const Tensor<T>& qkv, const AttentionParams<T>& p, std::int64_t gh,
                        std::int64_t gw) {
  const std::int64_t B = qkv.dim(0), N = qkv.dim(1), C = qkv.dim(2) / 3;
  const std::int64_t H = p.heads, D = C / H;
  auto parts = chunk(qkv, 3, 2);
  auto split_heads = [&](const Tensor<T>& t) {
    return reshape(transpose(reshape(t, {B, N, H, D}), 1, 2), {B * H, N, D});
  };
  auto q = split_heads(parts[0]);
  auto k = split_heads(parts[1]);
  auto v = split_heads(parts[2]);
  if (p.rope) {
    auto table = Rope2DTable<T>::build(gh, gw, D);
    q = rope_rotate(q, table.cos_t, table.sin_t);
    k = rope_rotate(k, table.cos_t, table.sin_t);
  }
  Tensor<T> logits;
  if (p.cosine) {
    logits = cosine_logits(q, k, p.log_tau);
  } else {
    logits = scale(matmul(q, transpose(k, 1, 2)),
                   static_cast<T>(1.0 / std::sqrt(static_cast<double>(D))));
  }
  auto att = softmax(logits, 2);
  auto ctx = matmul(att, v);  // (B*H, N, D)
  return reshape(transpose(reshape(ctx, {B, H, N, D}), 1, 2), {B, N, C});
}

template <typename T>
void validate_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  check_shape(x.rank() == 4, "attention: want input (B,C,H,W), got " + shape_str(x.shape()));
  const std::int64_t C = x.dim(1);
  check_shape(p.w_qkv.rank() == 2 && p.w_qkv.dim(0) == C && p.w_qkv.dim(1) == 3 * C,
              "attention: qkv weights " + shape_str(p.w_qkv.shape()) +
                  " do not match channels " + std::to_string(C));
  check_shape(p.heads > 0 && C % p.heads == 0,
              "attention: channels " + std::to_string(C) + " not divisible by heads " +
                  std::to_string(p.heads));
  if (p.rope)
    check_shape((C / p.heads) % 4 == 0, "attention: rope needs head_dim % 4 == 0, got " +
                                            std::to_string(C / p.heads));
  if (p.cosine)
    check_shape(p.log_tau.rank() == 1 && p.log_tau.dim(0) == p.heads,
                "attention: log_tau shape " + shape_str(p.log_tau.shape()) +
                    " does not match heads " + std::to_string(p.heads));
}

}  // namespace detail

// Full-grid multi-head self-attention: (B,C,H,W) -> (B,C,H,W).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  detail::validate_attention(x, p);
  check_shape(p.downsample == 1, "multi_head_attention: params specify downsample != 1");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  auto tokens = map_to_tokens(x);
  auto qkv = linear(tokens, p.w_qkv, p.b_qkv);
  auto ctx = detail::attend_tokens(qkv, p, h, w);
  auto out = linear(ctx, p.w_out, p.b_out);
  return tokens_to_map(out, h, w);
}

// Token-downsampled self-attention. The QKV map is computed at full
// resolution, regrouped into s*s half-resolution sub-features stacked along
// the batch axis (total tensor size unchanged), each sub-feature attends
// within itself, and the outputs are regrouped back. With s=2 each of the four
// sub-attentions costs 1/16 of full-grid attention, so the attention core
// costs exactly 1/4 of the full-grid core.
template <typename T>
Tensor<T> downsampled_self_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  detail::validate_attention(x, p);
  const std::int64_t s = p.downsample;
  check_shape(s == 2, "downsampled_self_attention: params specify downsample != 2");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  check_shape(h % s == 0 && w % s == 0, "downsampled_self_attention: grid " +
                                            shape_str(x.shape()) + " not divisible by " +
                                            std::to_string(s));
  auto tokens = map_to_tokens(x);
  auto qkv = linear(tokens, p.w_qkv, p.b_qkv);                  // (B,N,3C)
  auto qkv_map = tokens_to_map(qkv, h, w);                      // (B,3C,h,w)
  auto sub = space_to_batch(qkv_map, s);                        // (B*s*s,3C,h/s,w/s)
  auto sub_tokens = map_to_tokens(sub);
  auto ctx = detail::attend_tokens(sub_tokens, p, h / s, w / s);
  auto ctx_map = tokens_to_map(ctx, h / s, w / s);              // (B*s*s,C,h/s,w/s)
  auto merged = batch_to_space(ctx_map, s);                     // (B,C,h,w)
  auto out = linear(map_to_tokens(merged), p.w_out, p.b_out);
  return tokens_to_map(out, h, w);
}

// Dispatch on the configured downsample factor.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  return p.downsample == 1 ? multi_head_attention(x, p) : downsampled_self_attention(x, p);
}

// Depthwise conv with a parallel identity shortcut, then fold space into
// batch: (B,C,H,W) -> (B*4,C,H/2,W/2). The shortcut merges into the kernel as
// a center-tap delta, so the pair (conv || id) re-parameterizes into a single
// conv at inference.
template <typename T>
Tensor<T> downsampler(const Tensor<T>& x, const Tensor<T>& dw_kernel) {
  auto y = add(depthwise_conv2d(x, dw_kernel), x);
  return space_to_batch(y, 2);
}

}  // namespace udit
