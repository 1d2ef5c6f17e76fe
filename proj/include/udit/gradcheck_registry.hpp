#pragma once

// One named finite-difference check per differentiable operation, plus the
// composite units and the end-to-end model. The command-line driver and the
// test harnesses iterate this same list, so "how many ops were checked" is
// the registry size by construction. Every case builds its own leaves from a
// fixed seed and runs in double precision.
//
// Data-movement ops (reshape, transposes, folds) are probed with a random
// weighting of the output rather than a plain mean: a mean is permutation
// invariant and would accept a scrambled gradient.

#include <functional>
#include <string>
#include <vector>

#include "udit/attention.hpp"
#include "udit/blocks.hpp"
#include "udit/gradcheck.hpp"
#include "udit/model.hpp"

namespace udit {

struct GradCheckCase {
  std::string module;  // tensor | attention | blocks | model
  std::string name;
  std::function<GradCheckReport()> run;
};

namespace detail {

template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed = 0xfeedu) {
  Rng rng(seed);
  return sum(mul(y, Tensor<T>::randn(y.shape(), rng)));
}

inline AttentionParams<double> gc_attn_params(std::int64_t c, std::int64_t heads, Rng& rng,
                                              bool cosine, bool rope,
                                              std::int64_t downsample = 1) {
  AttentionParams<double> p;
  p.heads = heads;
  p.downsample = downsample;
  p.cosine = cosine;
  p.rope = rope;
  p.w_qkv = Tensor<double>::randn({c, 3 * c}, rng, 0.3);
  p.b_qkv = Tensor<double>::randn({3 * c}, rng, 0.3);
  p.w_out = Tensor<double>::randn({c, c}, rng, 0.3);
  p.b_out = Tensor<double>::randn({c}, rng, 0.3);
  p.log_tau = Tensor<double>::randn({heads}, rng, 0.2);
  return p;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_registry() {
  using D = Tensor<double>;
  std::vector<GradCheckCase> out;
  auto put = [&out](const char* module, const char* name, std::function<GradCheckReport()> fn) {
    out.push_back({module, name, std::move(fn)});
  };

  put("tensor", "add", [] {
    Rng rng(11);
    auto a = D::randn({2, 3}, rng), b = D::randn({2, 3}, rng);
    return gradcheck<double>({a, b}, [&] { return detail::probe(add(a, b)); });
  });
  put("tensor", "sub", [] {
    Rng rng(12);
    auto a = D::randn({2, 3}, rng), b = D::randn({2, 3}, rng);
    return gradcheck<double>({a, b}, [&] { return detail::probe(sub(a, b)); });
  });
  put("tensor", "mul", [] {
    Rng rng(13);
    auto a = D::randn({2, 3}, rng), b = D::randn({2, 3}, rng);
    return gradcheck<double>({a, b}, [&] { return detail::probe(mul(a, b)); });
  });
  put("tensor", "scale", [] {
    Rng rng(14);
    auto a = D::randn({2, 3}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(scale(a, -1.7)); });
  });
  put("tensor", "neg", [] {
    Rng rng(15);
    auto a = D::randn({2, 3}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(neg(a)); });
  });
  put("tensor", "exp", [] {
    Rng rng(16);
    auto a = D::randn({2, 3}, rng, 0.3);
    return gradcheck<double>({a}, [&] { return detail::probe(udit::exp(a)); });
  });
  put("tensor", "clamp_max", [] {
    Rng rng(17);
    auto a = D::randn({3, 4}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(clamp_max(a, 0.25)); });
  });
  put("tensor", "silu", [] {
    Rng rng(18);
    auto a = D::randn({2, 5}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(silu(a)); });
  });
  put("tensor", "gelu", [] {
    Rng rng(19);
    auto a = D::randn({2, 5}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(gelu(a)); });
  });
  put("tensor", "softmax", [] {
    Rng rng(20);
    auto a = D::randn({2, 3, 4}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(softmax(a, 2)); });
  });
  put("tensor", "layer_norm", [] {
    Rng rng(21);
    auto x = D::randn({2, 3, 8}, rng);
    auto g = D::randn({8}, rng, 0.3), b = D::randn({8}, rng, 0.3);
    GradCheckOptions opt;
    opt.h = 1e-5;  // strong curvature: the default step's truncation error
                   // swamps the tiniest gradients
    return gradcheck<double>(
        {x, g, b}, [&] { return detail::probe(layer_norm(x, g, b)); }, opt);
  });
  put("tensor", "sum", [] {
    Rng rng(22);
    auto a = D::randn({3, 4}, rng);
    return gradcheck<double>({a}, [&] { return sum(a); });
  });
  put("tensor", "mean", [] {
    Rng rng(23);
    auto a = D::randn({3, 4}, rng);
    return gradcheck<double>({a}, [&] { return mean(a); });
  });
  put("tensor", "mse_loss", [] {
    Rng rng(24);
    auto a = D::randn({2, 5}, rng), b = D::randn({2, 5}, rng);
    return gradcheck<double>({a, b}, [&] { return mse_loss(a, b); });
  });
  put("tensor", "matmul", [] {
    Rng rng(25);
    auto a = D::randn({2, 3, 4}, rng), b = D::randn({2, 4, 5}, rng);
    return gradcheck<double>({a, b}, [&] { return detail::probe(matmul(a, b)); });
  });
  put("tensor", "linear", [] {
    Rng rng(26);
    auto x = D::randn({2, 3, 6}, rng);
    auto w = D::randn({6, 4}, rng, 0.3);
    auto b = D::randn({4}, rng, 0.3);
    return gradcheck<double>({x, w, b}, [&] { return detail::probe(linear(x, w, b)); });
  });
  put("tensor", "depthwise_conv2d", [] {
    Rng rng(27);
    auto x = D::randn({1, 2, 4, 4}, rng);
    auto k = D::randn({2, 1, 3, 3}, rng, 0.3);
    return gradcheck<double>({x, k}, [&] { return detail::probe(depthwise_conv2d(x, k)); });
  });
  put("tensor", "embedding", [] {
    Rng rng(28);
    auto table = D::randn({5, 4}, rng);
    const std::vector<std::int64_t> ids = {0, 2, 4, 2};  // repeat tests accumulation
    return gradcheck<double>({table}, [&] { return detail::probe(embedding(table, ids)); });
  });
  put("tensor", "modulate", [] {
    Rng rng(29);
    auto x = D::randn({2, 3, 4}, rng);
    auto sh = D::randn({2, 4}, rng, 0.3), sc = D::randn({2, 4}, rng, 0.3);
    return gradcheck<double>({x, sh, sc}, [&] { return detail::probe(modulate(x, sh, sc)); });
  });
  put("tensor", "gate_tokens", [] {
    Rng rng(30);
    auto x = D::randn({2, 3, 4}, rng);
    auto g = D::randn({2, 4}, rng, 0.3);
    return gradcheck<double>({x, g}, [&] { return detail::probe(gate_tokens(x, g)); });
  });
  put("tensor", "row_l2_normalize", [] {
    Rng rng(31);
    auto x = D::randn({2, 3, 8}, rng);
    return gradcheck<double>({x}, [&] { return detail::probe(row_l2_normalize(x, 1e-8)); });
  });
  put("tensor", "scale_per_head", [] {
    Rng rng(32);
    auto x = D::randn({4, 3, 4}, rng);
    auto s = D::randn({2}, rng, 0.3);
    return gradcheck<double>({x, s}, [&] { return detail::probe(scale_per_head(x, s)); });
  });
  put("tensor", "rope_rotate", [] {
    Rng rng(33);
    auto x = D::randn({2, 4, 8}, rng);
    auto tab = Rope2DTable<double>::build(2, 2, 8);
    return gradcheck<double>(
        {x}, [&] { return detail::probe(rope_rotate(x, tab.cos_t, tab.sin_t)); });
  });
  put("tensor", "reshape", [] {
    Rng rng(34);
    auto a = D::randn({2, 6}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(reshape(a, {3, 4})); });
  });
  put("tensor", "transpose", [] {
    Rng rng(35);
    auto a = D::randn({2, 3, 4}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(transpose(a, 0, 2)); });
  });
  put("tensor", "slice", [] {
    Rng rng(36);
    auto a = D::randn({2, 5, 3}, rng);
    return gradcheck<double>({a}, [&] { return detail::probe(slice(a, 1, 1, 3)); });
  });
  put("tensor", "concat", [] {
    Rng rng(37);
    auto a = D::randn({2, 3}, rng), b = D::randn({2, 2}, rng);
    return gradcheck<double>(
        {a, b}, [&] { return detail::probe(concat(std::vector<D>{a, b}, 1)); });
  });
  put("tensor", "chunk", [] {
    Rng rng(38);
    auto a = D::randn({2, 6}, rng);
    return gradcheck<double>({a}, [&] {
      auto parts = chunk(a, 3, 1);
      return add(detail::probe(parts[0], 1), add(detail::probe(parts[1], 2),
                                                 detail::probe(parts[2], 3)));
    });
  });
  put("tensor", "space_to_batch", [] {
    Rng rng(39);
    auto x = D::randn({2, 3, 4, 6}, rng);
    return gradcheck<double>({x}, [&] { return detail::probe(space_to_batch(x, 2)); });
  });
  put("tensor", "batch_to_space", [] {
    Rng rng(40);
    auto x = D::randn({8, 3, 2, 3}, rng);
    return gradcheck<double>({x}, [&] { return detail::probe(batch_to_space(x, 2)); });
  });

  put("attention", "cosine_rope_attention", [] {
    Rng rng(50);
    auto p = detail::gc_attn_params(8, 2, rng, true, true);
    auto x = D::randn({1, 8, 2, 2}, rng);
    return gradcheck<double>({x, p.w_qkv, p.b_qkv, p.w_out, p.b_out, p.log_tau},
                             [&] { return mean(multi_head_attention(x, p)); });
  });
  put("attention", "scaled_dot_attention", [] {
    Rng rng(51);
    auto p = detail::gc_attn_params(8, 2, rng, false, false);
    auto x = D::randn({1, 8, 2, 2}, rng);
    return gradcheck<double>({x, p.w_qkv, p.b_qkv, p.w_out, p.b_out},
                             [&] { return mean(multi_head_attention(x, p)); });
  });
  put("attention", "downsampled_attention", [] {
    Rng rng(52);
    auto p = detail::gc_attn_params(8, 2, rng, true, true, 2);
    auto x = D::randn({1, 8, 4, 4}, rng);
    return gradcheck<double>({x, p.w_qkv, p.b_qkv, p.w_out, p.b_out, p.log_tau},
                             [&] { return mean(downsampled_self_attention(x, p)); });
  });
  put("attention", "downsampler", [] {
    Rng rng(53);
    auto x = D::randn({2, 3, 4, 6}, rng);
    auto k = D::randn({3, 1, 3, 3}, rng, 0.3);
    return gradcheck<double>({x, k}, [&] { return detail::probe(downsampler(x, k)); });
  });

  put("blocks", "ffn_dwconv", [] {
    Rng rng(60);
    FfnParams<double> p;
    p.w1 = D::randn({6, 12}, rng, 0.3);
    p.b1 = D::randn({12}, rng, 0.3);
    p.dw = D::randn({12, 1, 3, 3}, rng, 0.3);
    p.w2 = D::randn({12, 6}, rng, 0.3);
    p.b2 = D::randn({6}, rng, 0.3);
    auto x = D::randn({1, 6, 4, 4}, rng);
    return gradcheck<double>({x, p.w1, p.b1, p.dw, p.w2, p.b2},
                             [&] { return mean(ffn_dwconv(x, p)); });
  });
  put("blocks", "udit_block", [] {
    Rng rng(61);
    const std::int64_t c = 8, e = 12;
    BlockParams<double> p;
    p.norm1_gain = D::randn({c}, rng, 0.3);
    p.norm1_bias = D::randn({c}, rng, 0.3);
    p.norm2_gain = D::randn({c}, rng, 0.3);
    p.norm2_bias = D::randn({c}, rng, 0.3);
    p.attn = detail::gc_attn_params(c, 2, rng, true, true);
    p.ffn.w1 = D::randn({c, 2 * c}, rng, 0.3);
    p.ffn.b1 = D::randn({2 * c}, rng, 0.3);
    p.ffn.dw = D::randn({2 * c, 1, 3, 3}, rng, 0.3);
    p.ffn.w2 = D::randn({2 * c, c}, rng, 0.3);
    p.ffn.b2 = D::randn({c}, rng, 0.3);
    p.w_ada = D::randn({e, 6 * c}, rng, 0.1);
    p.b_ada = D::randn({6 * c}, rng, 0.1);
    auto x = D::randn({1, c, 2, 2}, rng);
    auto emb = D::randn({1, e}, rng);
    return gradcheck<double>(
        {x, emb, p.norm1_gain, p.norm1_bias, p.norm2_gain, p.norm2_bias, p.attn.w_qkv,
         p.attn.b_qkv, p.attn.w_out, p.attn.b_out, p.attn.log_tau, p.ffn.w1, p.ffn.b1, p.ffn.dw,
         p.ffn.w2, p.ffn.b2, p.w_ada, p.b_ada},
        [&] { return mean(udit_block(x, emb, p)); });
  });
  put("blocks", "encoder_transition", [] {
    Rng rng(62);
    EncoderTransitionParams<double> p;
    p.dw = D::randn({4, 1, 3, 3}, rng, 0.3);
    p.w_lift = D::randn({16, 8}, rng, 0.3);
    p.b_lift = D::randn({8}, rng, 0.3);
    auto x = D::randn({1, 4, 4, 4}, rng);
    return gradcheck<double>({x, p.dw, p.w_lift, p.b_lift},
                             [&] { return detail::probe(encoder_transition(x, p)); });
  });
  put("blocks", "decoder_transition", [] {
    Rng rng(63);
    DecoderTransitionParams<double> p;
    p.w_up = D::randn({8, 16}, rng, 0.3);
    p.b_up = D::randn({16}, rng, 0.3);
    p.w_fuse = D::randn({8, 4}, rng, 0.3);
    p.b_fuse = D::randn({4}, rng, 0.3);
    auto x = D::randn({1, 8, 2, 2}, rng);
    auto skip = D::randn({1, 4, 4, 4}, rng);
    return gradcheck<double>({x, skip, p.w_up, p.b_up, p.w_fuse, p.b_fuse},
                             [&] { return detail::probe(decoder_transition(x, skip, p)); });
  });

  put("model", "segment_embedding", [] {
    UDiTConfig cfg = udit_t_config();
    cfg.latent_h = 8;
    cfg.latent_w = 8;
    auto m = build_model<double>(cfg, 64);
    auto& e = m.embedders[0];
    return gradcheck<double>(
        {e.t_w1, e.t_b1, e.t_w2, e.t_b2, e.label_table},
        [&] { return detail::probe(detail::segment_embedding(m, 0, {3, 250}, {0, 1})); });
  });
  put("model", "forward", [] {
    UDiTConfig cfg = udit_t_config();
    cfg.latent_h = 8;
    cfg.latent_w = 8;
    auto m = build_model<double>(cfg, 67);
    // move off the zero-init saddle so head and gate gradients are live
    Rng rng(71);
    std::vector<Tensor<double>> leaves;
    visit_params(m, [&](const std::string&, Tensor<double>& t, const Shape&, SlotInit) {
      for (auto& v : t.data_mut()) v += 0.02 * (rng.uniform() - 0.5);
      leaves.push_back(t);
    });
    auto x = Tensor<double>::randn({1, 4, 8, 8}, rng);
    leaves.push_back(x);
    GradCheckOptions opt;
    opt.max_coords = 60;
    return gradcheck<double>(
        leaves, [&] { return mean(forward(m, x, {250}, {1})); }, opt);
  });

  return out;
}

}  // namespace udit
