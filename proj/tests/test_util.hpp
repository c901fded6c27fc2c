#pragma once

// Shared reference implementations for the test suites. Everything here is
// deliberately slow and literal: plain loops, long double accumulation, no
// shared code with the library paths under test beyond the data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mavos/fusion.hpp"
#include "mavos/masks.hpp"
#include "mavos/rng.hpp"
#include "mavos/tensor.hpp"

namespace oracle {

using mavos::BinMask;
using mavos::FusionWeights;
using mavos::LinearProjection;
using mavos::Tensor;
using mavos::TokenMap;

// Row-major long double matrix.
struct Mat {
    int r = 0, c = 0;
    std::vector<long double> v;

    Mat() = default;
    Mat(int rr, int cc) : r(rr), c(cc), v(static_cast<size_t>(rr) * cc, 0.0L) {}

    long double& at(int i, int j) { return v[static_cast<size_t>(i) * c + j]; }
    long double at(int i, int j) const { return v[static_cast<size_t>(i) * c + j]; }
};

inline Mat from_tensor(const Tensor<double>& t) {
    Mat m(static_cast<int>(t.rows()), t.cols());
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = t[static_cast<int64_t>(i)];
    return m;
}

inline double max_abs_diff(const Tensor<double>& a, const Mat& b) {
    double worst = 0.0;
    for (size_t i = 0; i < b.v.size(); ++i) {
        double d = std::abs(static_cast<double>(static_cast<long double>(a[static_cast<int64_t>(i)]) - b.v[i]));
        worst = std::max(worst, d);
    }
    return worst;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.r, b.c);
    for (int i = 0; i < a.r; ++i) {
        for (int j = 0; j < b.c; ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < a.c; ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

inline Mat matmul_nt(const Mat& a, const Mat& b) {
    Mat out(a.r, b.r);
    for (int i = 0; i < a.r; ++i) {
        for (int j = 0; j < b.r; ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < a.c; ++k) acc += a.at(i, k) * b.at(j, k);
            out.at(i, j) = acc;
        }
    }
    return out;
}

inline Mat linear(const Mat& x, const LinearProjection<double>& p) {
    int in = p.weight.dim(0), out_c = p.weight.dim(1);
    Mat out(x.r, out_c);
    for (int i = 0; i < x.r; ++i) {
        for (int j = 0; j < out_c; ++j) {
            long double acc = p.bias[j];
            for (int k = 0; k < in; ++k) {
                acc += x.at(i, k) * static_cast<long double>(p.weight[static_cast<int64_t>(k) * out_c + j]);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

inline Mat softmax_rows(const Mat& s) {
    Mat out(s.r, s.c);
    for (int i = 0; i < s.r; ++i) {
        long double mx = s.at(i, 0);
        for (int j = 1; j < s.c; ++j) mx = std::max(mx, s.at(i, j));
        long double denom = 0.0L;
        for (int j = 0; j < s.c; ++j) denom += std::exp(s.at(i, j) - mx);
        for (int j = 0; j < s.c; ++j) out.at(i, j) = std::exp(s.at(i, j) - mx) / denom;
    }
    return out;
}

inline long double gelu1(long double x) {
    const long double c = 0.7978845608028654L;
    const long double a = 0.044715L;
    return 0.5L * x * (1.0L + std::tanh(c * (x + a * x * x * x)));
}

inline Mat gelu(Mat m) {
    for (auto& x : m.v) x = gelu1(x);
    return m;
}

// [h*w x d] grid treated spatially: 3x3 depthwise convolution, zero padded.
inline Mat dwconv3(const Mat& g, int h, int w, const Tensor<double>& k) {
    int d = g.c;
    Mat out(g.r, g.c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int f = 0; f < d; ++f) {
                long double acc = 0.0L;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        int sy = y + dy, sx = x + dx;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        acc += g.at(sy * w + sx, f) *
                               static_cast<long double>(k.at3(dy + 1, dx + 1, f));
                    }
                }
                out.at(y * w + x, f) = acc;
            }
        }
    }
    return out;
}

struct CaOracle {
    Mat out;
    Mat attn;
};

// softmax(f_q(t) f_k(c)^T / sqrt(d)) f_v(c), explicit everywhere.
inline CaOracle cross_attention(const TokenMap<double>& tgt, const TokenMap<double>& ctx,
                                const FusionWeights<double>& w) {
    Mat q = linear(from_tensor(tgt.tokens), w.f_q);
    Mat k = linear(from_tensor(ctx.tokens), w.f_k);
    Mat v = linear(from_tensor(ctx.tokens), w.f_v);
    Mat scores = matmul_nt(q, k);
    long double s = 1.0L / std::sqrt(static_cast<long double>(w.d));
    for (auto& x : scores.v) x *= s;
    CaOracle r;
    r.attn = softmax_rows(scores);
    r.out = matmul(r.attn, v);
    return r;
}

struct HcOracle {
    std::vector<Mat> levels;          // grid levels, each [h*w x d]
    std::vector<long double> pooled;  // mean over the last level, [d]
};

// Single-grid pyramid: z = f_z(ctx), then `levels` rounds of GeLU(dwconv),
// each round kept; pooled = global average of the last round.
inline HcOracle hierarchical(const TokenMap<double>& ctx, const FusionWeights<double>& w) {
    HcOracle r;
    Mat z = linear(from_tensor(ctx.tokens), w.f_z);
    for (int l = 0; l < w.levels; ++l) {
        z = gelu(dwconv3(z, ctx.h, ctx.w, w.dwconv[l]));
        r.levels.push_back(z);
    }
    r.pooled.assign(w.d, 0.0L);
    for (int i = 0; i < z.r; ++i) {
        for (int f = 0; f < w.d; ++f) r.pooled[f] += z.at(i, f);
    }
    for (auto& x : r.pooled) x /= z.r;
    return r;
}

// Gate level l by column l of f_g(ctx); the last gate column weights the
// pooled vector broadcast over the grid.
inline Mat gated(const HcOracle& hc, const TokenMap<double>& ctx, const FusionWeights<double>& w) {
    Mat gates = linear(from_tensor(ctx.tokens), w.f_g);
    int t = ctx.h * ctx.w;
    Mat out(t, w.d);
    for (int i = 0; i < t; ++i) {
        for (int f = 0; f < w.d; ++f) {
            long double acc = 0.0L;
            for (int l = 0; l < w.levels; ++l) acc += gates.at(i, l) * hc.levels[l].at(i, f);
            acc += gates.at(i, w.levels) * hc.pooled[f];
            out.at(i, f) = acc;
        }
    }
    return out;
}

// f_q(target) elementwise times f_fm(gated summary).
inline Mat focal(const TokenMap<double>& tgt, const TokenMap<double>& ctx,
                 const FusionWeights<double>& w) {
    HcOracle hc = hierarchical(ctx, w);
    LinearProjection<double> fm = w.f_fm;
    Mat zfm = linear(gated(hc, ctx, w), fm);
    Mat q = linear(from_tensor(tgt.tokens), w.f_q);
    Mat out(q.r, q.c);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = q.v[i] * zfm.v[i];
    return out;
}

// Full operator: the plain attention map, over values built per context grid
// from the gated pyramid summary, projected once by f_fm.
inline CaOracle modulated(const TokenMap<double>& tgt, const TokenMap<double>& ctx,
                          const FusionWeights<double>& w) {
    Mat q = linear(from_tensor(tgt.tokens), w.f_q);
    Mat k = linear(from_tensor(ctx.tokens), w.f_k);
    int per = ctx.h * ctx.w;
    int grids = ctx.tokens.dim(0) / per;
    Mat z(grids * per, w.d);
    for (int c = 0; c < grids; ++c) {
        TokenMap<double> chunk;
        chunk.h = ctx.h;
        chunk.w = ctx.w;
        chunk.tokens = Tensor<double>({per, w.d});
        for (int i = 0; i < per; ++i) {
            for (int f = 0; f < w.d; ++f) {
                chunk.tokens.at2(i, f) = ctx.tokens.at2(c * per + i, f);
            }
        }
        HcOracle hc = hierarchical(chunk, w);
        Mat ga = gated(hc, chunk, w);
        for (int i = 0; i < per; ++i) {
            for (int f = 0; f < w.d; ++f) z.at(c * per + i, f) = ga.at(i, f);
        }
    }
    Mat vals = linear(z, w.f_fm);
    Mat scores = matmul_nt(q, k);
    long double s = 1.0L / std::sqrt(static_cast<long double>(w.d));
    for (auto& x : scores.v) x *= s;
    CaOracle r;
    r.attn = softmax_rows(scores);
    r.out = matmul(r.attn, vals);
    return r;
}

// ---------------------------------------------------------------------------
// Mask oracles.
// ---------------------------------------------------------------------------

// Boundary by definition: a set pixel on the image edge or with an unset
// 4-neighbor.
inline BinMask boundary_brute(const BinMask& m) {
    BinMask b(m.h, m.w);
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            bool edge = y == 0 || x == 0 || y == m.h - 1 || x == m.w - 1;
            bool hole = (y > 0 && !m.at(y - 1, x)) || (y < m.h - 1 && !m.at(y + 1, x)) ||
                        (x > 0 && !m.at(y, x - 1)) || (x < m.w - 1 && !m.at(y, x + 1));
            if (edge || hole) b.at(y, x) = 1;
        }
    }
    return b;
}

// F measure by brute force: every boundary pixel of one mask is scanned
// against every boundary pixel of the other for a match within Euclidean
// distance 1.
inline double f_boundary_brute(const BinMask& pred, const BinMask& gt) {
    bool pe = pred.empty_mask(), ge = gt.empty_mask();
    if (pe && ge) return 1.0;
    if (pe || ge) return 0.0;
    BinMask pb = boundary_brute(pred);
    BinMask gb = boundary_brute(gt);
    std::vector<std::pair<int, int>> pp, gp;
    for (int y = 0; y < pb.h; ++y) {
        for (int x = 0; x < pb.w; ++x) {
            if (pb.at(y, x)) pp.push_back({y, x});
            if (gb.at(y, x)) gp.push_back({y, x});
        }
    }
    auto matched = [](const std::vector<std::pair<int, int>>& from,
                      const std::vector<std::pair<int, int>>& against) {
        size_t hits = 0;
        for (auto [y, x] : from) {
            bool hit = false;
            for (auto [gy, gx] : against) {
                int dy = y - gy, dx = x - gx;
                if (dy * dy + dx * dx <= 1) {
                    hit = true;
                    break;
                }
            }
            hits += hit;
        }
        return hits;
    };
    double precision = pp.empty() ? 0.0 : static_cast<double>(matched(pp, gp)) / pp.size();
    double recall = gp.empty() ? 0.0 : static_cast<double>(matched(gp, pp)) / gp.size();
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

inline double j_brute(const BinMask& a, const BinMask& b) {
    size_t inter = 0, uni = 0;
    for (size_t p = 0; p < a.px.size(); ++p) {
        bool pa = a.px[p] != 0, pb = b.px[p] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Random instances.
// ---------------------------------------------------------------------------

inline Tensor<double> rand_tensor(const std::vector<int>& shape, mavos::Rng& rng,
                                  double scale = 1.0) {
    Tensor<double> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-scale, scale);
    return t;
}

inline TokenMap<double> rand_tokens(int h, int w, int grids, int d, mavos::Rng& rng) {
    return TokenMap<double>(rand_tensor({grids * h * w, d}, rng), h, w);
}

}  // namespace oracle
