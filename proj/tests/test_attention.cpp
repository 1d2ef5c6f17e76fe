#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "udit/attention.hpp"
#include "udit/gradcheck.hpp"
#include "udit/rng.hpp"

using namespace udit;

namespace {

template <typename T>
AttentionParams<T> random_params(std::int64_t c, std::int64_t heads, Rng& rng, bool cosine,
                                 bool rope, std::int64_t downsample = 1) {
  AttentionParams<T> p;
  p.heads = heads;
  p.downsample = downsample;
  p.cosine = cosine;
  p.rope = rope;
  p.w_qkv = Tensor<T>::randn({c, 3 * c}, rng, T(0.3));
  p.b_qkv = Tensor<T>::randn({3 * c}, rng, T(0.3));
  p.w_out = Tensor<T>::randn({c, c}, rng, T(0.3));
  p.b_out = Tensor<T>::randn({c}, rng, T(0.3));
  p.log_tau = Tensor<T>::randn({heads}, rng, T(0.2));
  return p;
}

// Plain-loop reference attention in double precision, written independently of
// the tensor ops. x laid out (B,C,H,W) row-major.
std::vector<double> ref_attention(const std::vector<double>& x, std::int64_t B, std::int64_t C,
                                  std::int64_t H, std::int64_t W,
                                  const AttentionParams<double>& p) {
  const std::int64_t N = H * W, heads = p.heads, D = C / heads;
  const auto& wq = p.w_qkv.data();
  const auto& bq = p.b_qkv.data();
  const auto& wo = p.w_out.data();
  const auto& bo = p.b_out.data();

  auto rotate = [&](std::vector<double>& vec, std::int64_t n) {
    const std::int64_t quarter = D / 4, half = D / 2;
    const std::int64_t py = n / W, px = n % W;
    for (std::int64_t pr = 0; pr < half; ++pr) {
      const std::int64_t axis_pair = pr % quarter;
      const double pos = pr < quarter ? static_cast<double>(px) : static_cast<double>(py);
      const double ang = pos * std::pow(10000.0, -2.0 * axis_pair / half);
      const double a = vec[2 * pr], b = vec[2 * pr + 1];
      vec[2 * pr] = a * std::cos(ang) - b * std::sin(ang);
      vec[2 * pr + 1] = a * std::sin(ang) + b * std::cos(ang);
    }
  };

  std::vector<double> out(static_cast<std::size_t>(B * C * N));
  for (std::int64_t b = 0; b < B; ++b) {
    // token-major projections: q/k/v[n][c]
    std::vector<std::vector<double>> q(N, std::vector<double>(C)), k = q, v = q;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t j = 0; j < 3 * C; ++j) {
        double acc = bq[j];
        for (std::int64_t i = 0; i < C; ++i) acc += x[(b * C + i) * N + n] * wq[i * 3 * C + j];
        if (j < C)
          q[n][j] = acc;
        else if (j < 2 * C)
          k[n][j - C] = acc;
        else
          v[n][j - 2 * C] = acc;
      }
    std::vector<std::vector<double>> ctx(N, std::vector<double>(C, 0.0));
    for (std::int64_t hd = 0; hd < heads; ++hd) {
      std::vector<std::vector<double>> qh(N, std::vector<double>(D)), kh = qh;
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t d = 0; d < D; ++d) {
          qh[n][d] = q[n][hd * D + d];
          kh[n][d] = k[n][hd * D + d];
        }
        if (p.rope) {
          rotate(qh[n], n);
          rotate(kh[n], n);
        }
      }
      double inv_tau = 1.0;
      if (p.cosine) {
        inv_tau = std::min(std::exp(-p.log_tau.data()[hd]), 100.0);
        for (std::int64_t n = 0; n < N; ++n) {
          double nq = 0, nk = 0;
          for (std::int64_t d = 0; d < D; ++d) {
            nq += qh[n][d] * qh[n][d];
            nk += kh[n][d] * kh[n][d];
          }
          nq = std::sqrt(nq) + 1e-8;
          nk = std::sqrt(nk) + 1e-8;
          for (std::int64_t d = 0; d < D; ++d) {
            qh[n][d] /= nq;
            kh[n][d] /= nk;
          }
        }
      }
      const double scl = p.cosine ? inv_tau : 1.0 / std::sqrt(static_cast<double>(D));
      for (std::int64_t i = 0; i < N; ++i) {
        std::vector<double> logit(N);
        double mx = -1e300;
        for (std::int64_t j = 0; j < N; ++j) {
          double acc = 0;
          for (std::int64_t d = 0; d < D; ++d) acc += qh[i][d] * kh[j][d];
          logit[j] = acc * scl;
          mx = std::max(mx, logit[j]);
        }
        double z = 0;
        for (auto& l : logit) {
          l = std::exp(l - mx);
          z += l;
        }
        for (std::int64_t j = 0; j < N; ++j)
          for (std::int64_t d = 0; d < D; ++d)
            ctx[i][hd * D + d] += logit[j] / z * v[j][hd * D + d];
      }
    }
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t j = 0; j < C; ++j) {
        double acc = bo[j];
        for (std::int64_t i = 0; i < C; ++i) acc += ctx[n][i] * wo[i * C + j];
        out[(b * C + j) * N + n] = acc;
      }
  }
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

}  // namespace

TEST_CASE("single token reduces to projected value path") {
  Rng rng(11);
  const std::int64_t c = 8;
  auto p = random_params<double>(c, 2, rng, true, true);
  auto x = Tensor<double>::randn({3, c, 1, 1}, rng);
  auto y = multi_head_attention(x, p);
  // One token: softmax weight is 1, rope at position (0,0) is identity, so the
  // output is w_out^T v + b_out with v the value projection of the token.
  for (std::int64_t b = 0; b < 3; ++b) {
    std::vector<double> v(c);
    for (std::int64_t j = 0; j < c; ++j) {
      double acc = p.b_qkv.data()[2 * c + j];
      for (std::int64_t i = 0; i < c; ++i)
        acc += x.data()[b * c + i] * p.w_qkv.data()[i * 3 * c + 2 * c + j];
      v[j] = acc;
    }
    for (std::int64_t j = 0; j < c; ++j) {
      double acc = p.b_out.data()[j];
      for (std::int64_t i = 0; i < c; ++i) acc += v[i] * p.w_out.data()[i * c + j];
      CHECK(y.data()[b * c + j] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero queries give uniform averaging over value tokens") {
  // w_qkv maps to q = k = 0 and v = x; w_out is identity. Attention weights
  // collapse to 1/N, so every output token is the per-channel token mean.
  const std::int64_t c = 3, h = 2, w = 2, N = h * w;
  AttentionParams<double> p;
  p.heads = 1;
  p.cosine = true;
  p.rope = true;
  p.w_qkv = Tensor<double>::zeros({c, 3 * c});
  for (std::int64_t i = 0; i < c; ++i) p.w_qkv.data_mut()[i * 3 * c + 2 * c + i] = 1.0;
  p.b_qkv = Tensor<double>::zeros({3 * c});
  p.w_out = Tensor<double>::zeros({c, c});
  for (std::int64_t i = 0; i < c; ++i) p.w_out.data_mut()[i * c + i] = 1.0;
  p.b_out = Tensor<double>::zeros({c});
  p.log_tau = Tensor<double>::full({1}, 0.7);
  p.rope = false;  // head_dim 3 has no pair structure
  Rng rng(5);
  auto x = Tensor<double>::randn({2, c, h, w}, rng);
  auto y = multi_head_attention(x, p);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mean = 0;
      for (std::int64_t n = 0; n < N; ++n) mean += x.data()[(b * c + ch) * N + n];
      mean /= static_cast<double>(N);
      for (std::int64_t n = 0; n < N; ++n)
        CHECK(y.data()[(b * c + ch) * N + n] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("full attention matches plain loop reference") {
  Rng rng(23);
  struct Cfg {
    std::int64_t c, heads, h, w;
    bool cosine, rope;
  };
  for (auto cfg : {Cfg{8, 2, 3, 2, true, true}, Cfg{8, 2, 2, 3, false, false},
                   Cfg{12, 3, 2, 2, true, true}, Cfg{8, 1, 4, 3, false, true},
                   Cfg{6, 2, 3, 3, true, false}}) {
    auto p = random_params<double>(cfg.c, cfg.heads, rng, cfg.cosine, cfg.rope);
    auto x = Tensor<double>::randn({2, cfg.c, cfg.h, cfg.w}, rng);
    auto y = multi_head_attention(x, p);
    auto ref = ref_attention(x.data(), 2, cfg.c, cfg.h, cfg.w, p);
    double m = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) m = std::max(m, std::abs(y.data()[i] - ref[i]));
    CHECK(m < 1e-12);
  }
}

namespace {

// Pull one of the four interleaved sub-grids out of a (B,C,H,W) map.
template <typename T>
Tensor<T> strided_subgrid(const Tensor<T>& x, std::int64_t dy, std::int64_t dx) {
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({B, C, H / 2, W / 2});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H / 2; ++y)
        for (std::int64_t xx = 0; xx < W / 2; ++xx)
          out.data_mut()[((b * C + c) * (H / 2) + y) * (W / 2) + xx] =
              x.data()[((b * C + c) * H + 2 * y + dy) * W + 2 * xx + dx];
  return out;
}

template <typename T>
void scatter_subgrid(Tensor<T>& dst, const Tensor<T>& sub, std::int64_t dy, std::int64_t dx) {
  const std::int64_t B = dst.dim(0), C = dst.dim(1), H = dst.dim(2), W = dst.dim(3);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H / 2; ++y)
        for (std::int64_t xx = 0; xx < W / 2; ++xx)
          dst.data_mut()[((b * C + c) * H + 2 * y + dy) * W + 2 * xx + dx] =
              sub.data()[((b * C + c) * (H / 2) + y) * (W / 2) + xx];
}

template <typename T>
void check_downsampled_equals_subgrids(double tol) {
  Rng rng(31);
  const std::int64_t c = 8, heads = 2;
  for (std::int64_t h = 2; h <= 8; h += 2)
    for (std::int64_t w = 2; w <= 8; w += 2) {
      auto p = random_params<T>(c, heads, rng, true, true, 2);
      auto x = Tensor<T>::randn({2, c, h, w}, rng);
      auto y = downsampled_self_attention(x, p);

      auto full = p;
      full.downsample = 1;
      Tensor<T> expect = Tensor<T>::zeros(x.shape());
      for (std::int64_t dy = 0; dy < 2; ++dy)
        for (std::int64_t dx = 0; dx < 2; ++dx) {
          auto part = multi_head_attention(strided_subgrid(x, dy, dx), full);
          scatter_subgrid(expect, part, dy, dx);
        }
      CHECK(max_abs_diff(y, expect) < tol);
    }
}

}  // namespace

TEST_CASE("downsampled attention equals independent attention per sub-grid") {
  // The fold into batch only regroups tokens, so attending each folded
  // sub-feature must give exactly what full attention gives on the matching
  // strided sub-grid. Covers every even grid from 2x2 to 8x8.
  check_downsampled_equals_subgrids<double>(1e-12);
  check_downsampled_equals_subgrids<float>(1e-5);
}

TEST_CASE("downsampled attention rejects odd grids") {
  Rng rng(7);
  auto p = random_params<double>(4, 1, rng, true, true, 2);
  auto x = Tensor<double>::randn({1, 4, 3, 4}, rng);
  CHECK_THROWS_AS(downsampled_self_attention(x, p), ShapeError);
}

TEST_CASE("cosine logits hit 1/tau for identical unit vectors") {
  Rng rng(41);
  const std::int64_t G = 2, N = 5, D = 8;
  auto q = Tensor<double>::randn({G, N, D}, rng);
  auto log_tau = Tensor<double>::from_vector({2}, {std::log(0.25), std::log(2.0)});
  auto logits = cosine_logits(q, q, log_tau);
  for (std::int64_t g = 0; g < G; ++g) {
    const double inv_tau = std::exp(-log_tau.data()[g]);
    for (std::int64_t i = 0; i < N; ++i) {
      const double diag = logits.data()[(g * N + i) * N + i];
      CHECK(diag == doctest::Approx(inv_tau).epsilon(1e-6));
    }
  }
}

TEST_CASE("cosine logits are invariant to query and key magnitude") {
  Rng rng(43);
  const std::int64_t G = 2, N = 4, D = 6;
  auto q = Tensor<double>::randn({G, N, D}, rng);
  auto k = Tensor<double>::randn({G, N, D}, rng);
  auto log_tau = Tensor<double>::full({G}, -0.3);
  auto base = cosine_logits(q, k, log_tau);
  auto scaled = cosine_logits(scale(q, 5.0), scale(k, 3.0), log_tau);
  CHECK(max_abs_diff(base, scaled) < 1e-6);
}

TEST_CASE("cosine temperature cap limits the logit scale") {
  Rng rng(47);
  auto q = Tensor<double>::randn({1, 3, 4}, rng);
  auto log_tau = Tensor<double>::full({1}, -10.0);  // exp(10) >> cap
  auto logits = cosine_logits(q, q, log_tau);
  double mx = 0;
  for (double v : logits.data()) mx = std::max(mx, std::abs(v));
  CHECK(mx <= 100.0 + 1e-9);
  // diagonal entries are cosine 1 scaled by the cap
  CHECK(logits.data()[0] == doctest::Approx(100.0).epsilon(1e-6));
}

TEST_CASE("rotary offsets preserve vector norms") {
  Rng rng(53);
  const std::int64_t h = 3, w = 4, D = 8;
  auto t = Rope2DTable<double>::build(h, w, D);
  auto q = Tensor<double>::randn({2, h * w, D}, rng);
  auto r = rope_rotate(q, t.cos_t, t.sin_t);
  for (std::int64_t g = 0; g < 2; ++g)
    for (std::int64_t n = 0; n < h * w; ++n) {
      double n0 = 0, n1 = 0;
      for (std::int64_t d = 0; d < D; ++d) {
        n0 += q.data()[(g * h * w + n) * D + d] * q.data()[(g * h * w + n) * D + d];
        n1 += r.data()[(g * h * w + n) * D + d] * r.data()[(g * h * w + n) * D + d];
      }
      CHECK(std::sqrt(n1) == doctest::Approx(std::sqrt(n0)).epsilon(1e-12));
    }
}

TEST_CASE("rotary offset at position zero is bitwise identity") {
  Rng rng(59);
  const std::int64_t h = 2, w = 3, D = 4;
  auto t = Rope2DTable<double>::build(h, w, D);
  auto q = Tensor<double>::randn({1, h * w, D}, rng);
  auto r = rope_rotate(q, t.cos_t, t.sin_t);
  for (std::int64_t d = 0; d < D; ++d) CHECK(r.data()[d] == q.data()[d]);
}

TEST_CASE("rotated dot products depend only on relative position") {
  Rng rng(61);
  const std::int64_t h = 5, w = 5, D = 8;
  auto t = Rope2DTable<double>::build(h, w, D);
  // same q vector at every token, same k vector at every token
  auto qv = Tensor<double>::randn({1, 1, D}, rng);
  auto kv = Tensor<double>::randn({1, 1, D}, rng);
  std::vector<double> qrep, krep;
  for (std::int64_t n = 0; n < h * w; ++n) {
    qrep.insert(qrep.end(), qv.data().begin(), qv.data().end());
    krep.insert(krep.end(), kv.data().begin(), kv.data().end());
  }
  auto q = rope_rotate(Tensor<double>::from_vector({1, h * w, D}, qrep), t.cos_t, t.sin_t);
  auto k = rope_rotate(Tensor<double>::from_vector({1, h * w, D}, krep), t.cos_t, t.sin_t);
  auto dot_at = [&](std::int64_t qy, std::int64_t qx, std::int64_t ky, std::int64_t kx) {
    const std::int64_t qn = qy * w + qx, kn = ky * w + kx;
    double acc = 0;
    for (std::int64_t d = 0; d < D; ++d) acc += q.data()[qn * D + d] * k.data()[kn * D + d];
    return acc;
  };
  // offset (+1,+2) from two different anchors
  CHECK(dot_at(1, 1, 2, 3) == doctest::Approx(dot_at(0, 0, 1, 2)).epsilon(1e-9));
  CHECK(dot_at(2, 0, 3, 2) == doctest::Approx(dot_at(0, 0, 1, 2)).epsilon(1e-9));
  // offset (-2,+1)
  CHECK(dot_at(3, 1, 1, 2) == doctest::Approx(dot_at(2, 0, 0, 1)).epsilon(1e-9));
}

TEST_CASE("rope table rejects head dims without pair structure") {
  CHECK_THROWS_AS(Rope2DTable<double>::build(2, 2, 6), ShapeError);
}

TEST_CASE("downsampler folds space into batch with a residual conv") {
  Rng rng(67);
  auto x = Tensor<double>::randn({2, 3, 4, 6}, rng);
  auto k = Tensor<double>::randn({3, 1, 3, 3}, rng, 0.2);
  auto y = downsampler(x, k);
  CHECK(y.shape() == Shape{8, 3, 2, 3});
  // identity shortcut merges into the kernel as a center-tap delta
  auto merged = Tensor<double>::from_vector(k.shape(), k.data());
  for (std::int64_t c = 0; c < 3; ++c) merged.data_mut()[c * 9 + 4] += 1.0;
  auto y2 = space_to_batch(depthwise_conv2d(x, merged), 2);
  CHECK(max_abs_diff(y, y2) < 1e-12);

  auto xf = Tensor<float>::randn({1, 2, 4, 4}, rng);
  auto kf = Tensor<float>::randn({2, 1, 3, 3}, rng, 0.2f);
  auto mf = Tensor<float>::from_vector(kf.shape(), kf.data());
  for (std::int64_t c = 0; c < 2; ++c) mf.data_mut()[c * 9 + 4] += 1.0f;
  CHECK(max_abs_diff(downsampler(xf, kf), space_to_batch(depthwise_conv2d(xf, mf), 2)) < 1e-6);
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(71);
  const std::int64_t c = 8, heads = 2, h = 2, w = 2;
  auto p = random_params<double>(c, heads, rng, true, true);
  auto x = Tensor<double>::randn({1, c, h, w}, rng);
  std::vector<Tensor<double>> leaves = {x, p.w_qkv, p.b_qkv, p.w_out, p.b_out, p.log_tau};
  auto rep = gradcheck<double>(leaves, [&] { return mean(multi_head_attention(x, p)); });
  CHECK(rep.worst_rel_err < 1e-6);

  auto pd = random_params<double>(c, heads, rng, true, true, 2);
  auto xd = Tensor<double>::randn({1, c, 4, 4}, rng);
  std::vector<Tensor<double>> leaves2 = {xd, pd.w_qkv, pd.b_qkv, pd.w_out, pd.b_out, pd.log_tau};
  auto rep2 =
      gradcheck<double>(leaves2, [&] { return mean(downsampled_self_attention(xd, pd)); });
  CHECK(rep2.worst_rel_err < 1e-6);

  // scaled-dot variant without rope exercises the other logit path
  auto ps = random_params<double>(c, heads, rng, false, false);
  std::vector<Tensor<double>> leaves3 = {x, ps.w_qkv, ps.b_qkv, ps.w_out, ps.b_out};
  auto rep3 = gradcheck<double>(leaves3, [&] { return mean(multi_head_attention(x, ps)); });
  CHECK(rep3.worst_rel_err < 1e-6);
}

TEST_CASE("downsampled attention needs strictly fewer traced flops") {
  Rng rng(73);
  const std::int64_t c = 8, heads = 2;
  auto p1 = random_params<double>(c, heads, rng, true, true, 1);
  auto p2 = p1;
  p2.downsample = 2;
  auto x = Tensor<double>::randn({1, c, 8, 8}, rng);
  std::uint64_t f1, f2;
  {
    FlopTrace t;
    multi_head_attention(x, p1);
    f1 = t.flops();
  }
  {
    FlopTrace t;
    downsampled_self_attention(x, p2);
    f2 = t.flops();
  }
  CHECK(f2 < f1);
  // the two logits/context products shrink by exactly 4x; everything else
  // (projections, softmax on 4x fewer entries, norms) also shrinks or holds
  const std::int64_t N = 64, D = c / heads;
  const std::uint64_t core1 = 2ull * heads * N * N * D * 2;
  const std::uint64_t core2 = core1 / 4;
  CHECK(f1 - f2 >= (core1 - core2) / 2);
}
