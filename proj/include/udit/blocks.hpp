#pragma once

// Transformer block with adaLN conditioning (zero-init gates so every block
// starts as the identity), a feed-forward net with an optional depthwise-conv
// stage on the hidden features, and the encoder/decoder stage transitions that
// trade spatial extent against channel width.

#include "udit/attention.hpp"
#include "udit/tensor.hpp"

namespace udit {

// Fold the identity shortcut of a (depthwise conv || identity) pair into the
// kernel: adds 1 to each channel's center tap. Inference uses only the merged
// kernel.
template <typename T>
Tensor<T> reparam_merge(const Tensor<T>& dw_kernel) {
  check_shape(dw_kernel.rank() == 4 && dw_kernel.dim(1) == 1 && dw_kernel.dim(2) == 3 &&
                  dw_kernel.dim(3) == 3,
              "reparam_merge: want (C,1,3,3) kernel, got " + shape_str(dw_kernel.shape()));
  Tensor<T> merged = Tensor<T>::from_vector(dw_kernel.shape(), dw_kernel.data());
  for (std::int64_t c = 0; c < dw_kernel.dim(0); ++c) merged.data_mut()[c * 9 + 4] += T(1);
  return merged;
}

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1;  // (c,rc), (rc)
  Tensor<T> dw;      // (rc,1,3,3); empty disables the depthwise stage
  Tensor<T> w2, b2;  // (rc,c), (c)
  bool merged = false;  // true: single merged kernel; false: conv + identity branch

  bool has_dw() const { return dw.node() && dw.numel() > 0; }
};

// linear(c -> rc) -> gelu -> [depthwise 3x3 || identity] -> linear(rc -> c),
// applied tokenwise except for the depthwise stage, which sees the h x w grid.
template <typename T>
Tensor<T> ffn_dwconv(const Tensor<T>& x, const FfnParams<T>& p) {
  check_shape(x.rank() == 4 && x.dim(1) == p.w1.dim(0),
              "ffn: input " + shape_str(x.shape()) + " does not match w1 " +
                  shape_str(p.w1.shape()));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  auto hidden = gelu(linear(map_to_tokens(x), p.w1, p.b1));
  if (p.has_dw()) {
    auto hm = tokens_to_map(hidden, h, w);
    hm = p.merged ? depthwise_conv2d(hm, reparam_merge(p.dw))
                  : add(depthwise_conv2d(hm, p.dw), hm);
    hidden = map_to_tokens(hm);
  }
  return tokens_to_map(linear(hidden, p.w2, p.b2), h, w);
}

template <typename T>
struct BlockParams {
  Tensor<T> norm1_gain, norm1_bias;  // (c)
  Tensor<T> norm2_gain, norm2_bias;  // (c)
  AttentionParams<T> attn;
  FfnParams<T> ffn;
  Tensor<T> w_ada, b_ada;  // (e,6c), (6c); zero-init so gates start at 0
};

// x + gate1 * Attn(modulate(LN(x))) followed by + gate2 * FFN(modulate(LN(.))).
// The six modulation vectors come from one linear map of silu(emb).
template <typename T>
Tensor<T> udit_block(const Tensor<T>& x, const Tensor<T>& emb, const BlockParams<T>& p) {
  check_shape(x.rank() == 4, "udit_block: want (B,c,h,w), got " + shape_str(x.shape()));
  check_shape(emb.rank() == 2 && emb.dim(0) == x.dim(0) && emb.dim(1) == p.w_ada.dim(0),
              "udit_block: embedding " + shape_str(emb.shape()) + " does not match adaLN " +
                  shape_str(p.w_ada.shape()));
  check_shape(p.w_ada.dim(1) == 6 * x.dim(1),
              "udit_block: adaLN output " + std::to_string(p.w_ada.dim(1)) +
                  " != 6 x channels " + std::to_string(x.dim(1)));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  auto mods = chunk(linear(silu(emb), p.w_ada, p.b_ada), 6, 1);
  const auto& sh1 = mods[0];
  const auto& sc1 = mods[1];
  const auto& g1 = mods[2];
  const auto& sh2 = mods[3];
  const auto& sc2 = mods[4];
  const auto& g2 = mods[5];

  auto tokens = map_to_tokens(x);
  auto a_in = modulate(layer_norm(tokens, p.norm1_gain, p.norm1_bias), sh1, sc1);
  auto a_out = map_to_tokens(self_attention(tokens_to_map(a_in, h, w), p.attn));
  auto t1 = add(tokens, gate_tokens(a_out, g1));

  auto f_in = modulate(layer_norm(t1, p.norm2_gain, p.norm2_bias), sh2, sc2);
  auto f_out = map_to_tokens(ffn_dwconv(tokens_to_map(f_in, h, w), p.ffn));
  return tokens_to_map(add(t1, gate_tokens(f_out, g2)), h, w);
}

template <typename T>
struct EncoderTransitionParams {
  Tensor<T> dw;              // (c,1,3,3)
  Tensor<T> w_lift, b_lift;  // (4c,2c), (2c)
  bool merged = false;
};

// (B,c,h,w) -> (B,2c,h/2,w/2): residual depthwise conv, fold space into batch,
// regroup the four phase-batches into channel blocks, then project 4c -> 2c.
// Total element count halves, matching the width-doubling rule.
template <typename T>
Tensor<T> encoder_transition(const Tensor<T>& x, const EncoderTransitionParams<T>& p) {
  check_shape(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
              "encoder_transition: want even spatial extents, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), c = x.dim(1), h2 = x.dim(2) / 2, w2 = x.dim(3) / 2;
  Tensor<T> folded;
  if (p.merged) {
    folded = space_to_batch(depthwise_conv2d(x, reparam_merge(p.dw)), 2);
  } else {
    folded = downsampler(x, p.dw);
  }
  auto grouped = reshape(folded, {B, 4 * c, h2, w2});
  return tokens_to_map(linear(map_to_tokens(grouped), p.w_lift, p.b_lift), h2, w2);
}

template <typename T>
struct DecoderTransitionParams {
  Tensor<T> w_up, b_up;      // (2c,4c), (4c)
  Tensor<T> w_fuse, b_fuse;  // (2c,c), (c)
};

// (B,2c,h,w) + skip (B,c,2h,2w) -> (B,c,2h,2w): project 2c -> 4c, spread the
// channel blocks back out as spatial phases, concat with the skip and fuse.
template <typename T>
Tensor<T> decoder_transition(const Tensor<T>& x, const Tensor<T>& skip,
                             const DecoderTransitionParams<T>& p) {
  check_shape(x.rank() == 4 && skip.rank() == 4, "decoder_transition: want rank-4 inputs");
  const std::int64_t B = x.dim(0), c2 = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t c = c2 / 2;
  check_shape(c2 % 2 == 0 && skip.dim(0) == B && skip.dim(1) == c && skip.dim(2) == 2 * h &&
                  skip.dim(3) == 2 * w,
              "decoder_transition: skip " + shape_str(skip.shape()) + " does not match input " +
                  shape_str(x.shape()));
  check_shape(p.w_up.dim(0) == c2 && p.w_up.dim(1) == 2 * c2,
              "decoder_transition: w_up shape " + shape_str(p.w_up.shape()));
  auto lifted = tokens_to_map(linear(map_to_tokens(x), p.w_up, p.b_up), h, w);  // (B,4c,h,w)
  auto phases = reshape(lifted, {B * 4, c, h, w});
  auto up = batch_to_space(phases, 2);  // (B,c,2h,2w)
  auto cat = concat(std::vector<Tensor<T>>{skip, up}, 1);  // (B,2c,2h,2w)
  return tokens_to_map(linear(map_to_tokens(cat), p.w_fuse, p.b_fuse), 2 * h, 2 * w);
}

}  // namespace udit
