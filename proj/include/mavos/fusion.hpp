#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mavos/graph.hpp"
#include "mavos/params.hpp"
#include "mavos/rng.hpp"

namespace mavos {

// Flattened spatial feature map: T tokens of D features, where the tokens are
// one or more stacked H x W grids in row-major order. Single frames have one
// grid; a memory context concatenated from several slots has one grid per
// slot. T must be a multiple of H * W.
template <typename T>
struct TokenMap {
    Tensor<T> tokens;  // [T x D]
    int h = 0;
    int w = 0;

    TokenMap() = default;
    TokenMap(Tensor<T> t, int hh, int ww) : tokens(std::move(t)), h(hh), w(ww) { validate(); }

    int grids() const { return tokens.dim(0) / (h * w); }

    void validate() const {
        if (tokens.rank() != 2) {
            throw DimensionError("token map must be rank 2, got " + tokens.shape_str());
        }
        if (h <= 0 || w <= 0 || tokens.dim(0) % (h * w) != 0) {
            throw DimensionError("token map of " + std::to_string(tokens.dim(0)) +
                                 " tokens does not tile a " + std::to_string(h) + "x" +
                                 std::to_string(w) + " grid");
        }
    }
};

// Graph-resident token map: a Var plus its grid dims.
struct TokenVar {
    Var v;
    int h = 0;
    int w = 0;
};

template <typename T>
struct LinearProjection {
    Tensor<T> weight;  // [in x out]
    Tensor<T> bias;    // [out]
};

// Parameters of one fusion operator family instance: the shared projections
// plus the depthwise pyramid kernels. Attention uses a single head with
// key scaling 1/sqrt(d).
template <typename T>
struct FusionWeights {
    LinearProjection<T> f_q;   // D -> D, queries (also the modulation carrier)
    LinearProjection<T> f_k;   // D -> D, keys
    LinearProjection<T> f_v;   // D -> D, plain attention values
    LinearProjection<T> f_z;   // D -> D, pyramid input projection
    LinearProjection<T> f_fm;  // D -> D, modulated value projection
    LinearProjection<T> f_g;   // D -> (levels + 1), aggregation gates
    std::vector<Tensor<T>> dwconv;  // `levels` kernels, each [3 x 3 x D]
    int d = 0;
    int levels = 0;
};

// Xavier-uniform init: keeps activation variance roughly constant through
// the stack. The fusion operators apply no normalization of their own, so
// this init alone sets their output scale.
template <typename T>
LinearProjection<T> make_linear(int in, int out, Rng& rng) {
    LinearProjection<T> p;
    p.weight = Tensor<T>({in, out});
    double bound = std::sqrt(6.0 / (in + out));
    for (int64_t i = 0; i < p.weight.numel(); ++i) {
        p.weight[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    p.bias = Tensor<T>::zeros({out});
    return p;
}

template <typename T>
FusionWeights<T> make_fusion_weights(int d, int levels, Rng& rng) {
    if (d <= 0 || levels <= 0) {
        throw ConfigError("fusion weights need positive feature dim and level count");
    }
    FusionWeights<T> w;
    w.d = d;
    w.levels = levels;
    w.f_q = make_linear<T>(d, d, rng);
    w.f_k = make_linear<T>(d, d, rng);
    w.f_v = make_linear<T>(d, d, rng);
    w.f_z = make_linear<T>(d, d, rng);
    w.f_fm = make_linear<T>(d, d, rng);
    w.f_g = make_linear<T>(d, levels + 1, rng);
    double bound = std::sqrt(6.0 / 18.0);  // Xavier over the 3x3 depthwise tap
    for (int l = 0; l < levels; ++l) {
        Tensor<T> k({3, 3, d});
        for (int64_t i = 0; i < k.numel(); ++i) k[i] = static_cast<T>(rng.uniform(-bound, bound));
        w.dwconv.push_back(std::move(k));
    }
    return w;
}

template <typename T>
void collect_params(LinearProjection<T>& p, Params<T>& out, const std::string& prefix) {
    out.add(prefix + ".weight", p.weight);
    out.add(prefix + ".bias", p.bias);
}

template <typename T>
void collect_params(FusionWeights<T>& w, Params<T>& out, const std::string& prefix) {
    collect_params(w.f_q, out, prefix + ".f_q");
    collect_params(w.f_k, out, prefix + ".f_k");
    collect_params(w.f_v, out, prefix + ".f_v");
    collect_params(w.f_z, out, prefix + ".f_z");
    collect_params(w.f_fm, out, prefix + ".f_fm");
    collect_params(w.f_g, out, prefix + ".f_g");
    for (size_t l = 0; l < w.dwconv.size(); ++l) {
        out.add(prefix + ".dwconv" + std::to_string(l), w.dwconv[l]);
    }
}

// Graph handles for one FusionWeights instance.
struct FusionVars {
    Var qw, qb, kw, kb, vw, vb, zw, zb, fmw, fmb, gw, gb;
    std::vector<Var> dw;
    int d = 0;
    int levels = 0;
};

template <typename T>
FusionVars lift(Graph<T>& g, const FusionWeights<T>& w, bool requires_grad) {
    FusionVars v;
    v.d = w.d;
    v.levels = w.levels;
    v.qw = g.input(w.f_q.weight, requires_grad);
    v.qb = g.input(w.f_q.bias, requires_grad);
    v.kw = g.input(w.f_k.weight, requires_grad);
    v.kb = g.input(w.f_k.bias, requires_grad);
    v.vw = g.input(w.f_v.weight, requires_grad);
    v.vb = g.input(w.f_v.bias, requires_grad);
    v.zw = g.input(w.f_z.weight, requires_grad);
    v.zb = g.input(w.f_z.bias, requires_grad);
    v.fmw = g.input(w.f_fm.weight, requires_grad);
    v.fmb = g.input(w.f_fm.bias, requires_grad);
    v.gw = g.input(w.f_g.weight, requires_grad);
    v.gb = g.input(w.f_g.bias, requires_grad);
    for (const auto& k : w.dwconv) v.dw.push_back(g.input(k, requires_grad));
    return v;
}

// Graph handles in the same order collect_params lists the tensors; the
// optimizer relies on the two walks matching element for element.
inline void collect_vars(const FusionVars& v, std::vector<Var>& out) {
    out.insert(out.end(), {v.qw, v.qb, v.kw, v.kb, v.vw, v.vb, v.zw, v.zb, v.fmw, v.fmb, v.gw,
                           v.gb});
    out.insert(out.end(), v.dw.begin(), v.dw.end());
}

template <typename T>
struct AttentionResult {
    Var out;   // [T_target x D]
    Var attn;  // [T_target x T_context], rows sum to 1
};

namespace detail {

template <typename T>
void check_features(const Graph<T>& g, const TokenVar& t, int d, const char* what) {
    const Tensor<T>& v = g.val(t.v);
    if (v.rank() != 2 || v.dim(1) != d) {
        throw DimensionError(std::string(what) + " tokens " + v.shape_str() +
                             " do not match weights with feature dim [" + std::to_string(d) + "]");
    }
    if (t.h <= 0 || t.w <= 0 || v.dim(0) % (t.h * t.w) != 0) {
        throw DimensionError(std::string(what) + " tokens " + v.shape_str() +
                             " do not tile a " + std::to_string(t.h) + "x" + std::to_string(t.w) +
                             " grid");
    }
}

// Scaled single-head attention map between projected queries and keys.
template <typename T>
Var attention_map(Graph<T>& g, Var q, Var k, int d) {
    Var scores = g.scale(g.matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(d))));
    return g.softmax_rows(scores);
}

}  // namespace detail

// Plain cross attention: softmax(f_q(target) f_k(context)^T / sqrt(d)) f_v(context).
template <typename T>
AttentionResult<T> cross_attention(Graph<T>& g, const TokenVar& target, const TokenVar& context,
                                   const FusionVars& w) {
    detail::check_features(g, target, w.d, "cross_attention target");
    detail::check_features(g, context, w.d, "cross_attention context");
    Var q = g.linear(target.v, w.qw, w.qb);
    Var k = g.linear(context.v, w.kw, w.kb);
    Var v = g.linear(context.v, w.vw, w.vb);
    Var a = detail::attention_map(g, q, k, w.d);
    return {g.matmul(a, v), a};
}

// Depthwise pyramid over one context grid: Z0 = f_z(context) reshaped to the
// grid, then `levels` rounds of GeLU(dwconv(.)), then a global average pool.
// Returns the L grid levels followed by the pooled [1 x 1 x D] level.
// The context must be a single grid.
template <typename T>
std::vector<Var> hierarchical_contextualization(Graph<T>& g, const TokenVar& context,
                                                const FusionVars& w) {
    detail::check_features(g, context, w.d, "hierarchical_contextualization context");
    const Tensor<T>& cv = g.val(context.v);
    if (cv.dim(0) != context.h * context.w) {
        throw DimensionError("hierarchical_contextualization expects a single grid, got " +
                             std::to_string(cv.dim(0)) + " tokens for a " +
                             std::to_string(context.h) + "x" + std::to_string(context.w) +
                             " grid");
    }
    Var z = g.reshape(g.linear(context.v, w.zw, w.zb), {context.h, context.w, w.d});
    std::vector<Var> levels;
    for (int l = 0; l < w.levels; ++l) {
        z = g.gelu(g.depthwise_conv(z, w.dw[l]));
        levels.push_back(z);
    }
    levels.push_back(g.global_avg_pool(z));
    return levels;
}

// Gate the pyramid levels with f_g(context) and sum them. The final gate
// channel weights the pooled level, broadcast back over the grid.
template <typename T>
Var gated_aggregation(Graph<T>& g, const std::vector<Var>& levels, const TokenVar& context,
                      const FusionVars& w) {
    detail::check_features(g, context, w.d, "gated_aggregation context");
    if (static_cast<int>(levels.size()) != w.levels + 1) {
        throw DimensionError("gated_aggregation: " + std::to_string(levels.size()) +
                             " levels do not match " + std::to_string(w.levels + 1) +
                             " gate channels");
    }
    Var gates = g.linear(context.v, w.gw, w.gb);  // [T x (levels+1)]
    Var acc;
    for (int l = 0; l < w.levels; ++l) {
        Var term = g.scale_rows(levels[l], g.col(gates, l));
        acc = acc.valid() ? g.add(acc, term) : term;
    }
    Var pooled = g.broadcast_rows(levels[w.levels], {context.h, context.w, w.d});
    Var term = g.scale_rows(pooled, g.col(gates, w.levels));
    return g.add(acc, term);
}

// Focal modulation: f_q(target) gated elementwise by the aggregated context
// summary. Target and context must share one grid.
template <typename T>
Var focal_modulation(Graph<T>& g, const TokenVar& target, const TokenVar& context,
                     const FusionVars& w) {
    detail::check_features(g, target, w.d, "focal_modulation target");
    const Tensor<T>& tv = g.val(target.v);
    const Tensor<T>& cv = g.val(context.v);
    if (tv.dim(0) != cv.dim(0)) {
        throw DimensionError("focal_modulation: target " + tv.shape_str() + " and context " +
                             cv.shape_str() + " must have the same token count");
    }
    std::vector<Var> levels = hierarchical_contextualization(g, context, w);
    Var zout = gated_aggregation(g, levels, context, w);
    Var zrows = g.reshape(zout, {context.h * context.w, w.d});
    return g.mul(g.linear(target.v, w.qw, w.qb), g.linear(zrows, w.fmw, w.fmb));
}

namespace detail {

// Modulated values for a (possibly multi-grid) context: per grid, run the
// pyramid and the gated sum, then project with f_fm.
template <typename T>
Var modulated_values(Graph<T>& g, const TokenVar& context, const FusionVars& w) {
    const Tensor<T>& cv = g.val(context.v);
    int per = context.h * context.w;
    int grids = cv.dim(0) / per;
    std::vector<Var> chunks;
    for (int c = 0; c < grids; ++c) {
        TokenVar chunk{g.slice_rows(context.v, c * per, (c + 1) * per), context.h, context.w};
        std::vector<Var> levels = hierarchical_contextualization(g, chunk, w);
        Var zout = gated_aggregation(g, levels, chunk, w);
        chunks.push_back(g.reshape(zout, {per, w.d}));
    }
    Var z = chunks.size() == 1 ? chunks[0] : g.concat_rows(chunks);
    return g.linear(z, w.fmw, w.fmb);
}

}  // namespace detail

// Modulated cross attention: the attention map of plain cross attention, but
// values are the focally modulated context summary f_fm(GA(HC(context)))
// instead of f_v(context).
template <typename T>
AttentionResult<T> modulated_cross_attention(Graph<T>& g, const TokenVar& target,
                                             const TokenVar& context, const FusionVars& w) {
    detail::check_features(g, target, w.d, "modulated_cross_attention target");
    detail::check_features(g, context, w.d, "modulated_cross_attention context");
    Var q = g.linear(target.v, w.qw, w.qb);
    Var k = g.linear(context.v, w.kw, w.kb);
    Var vals = detail::modulated_values(g, context, w);
    Var a = detail::attention_map(g, q, k, w.d);
    return {g.matmul(a, vals), a};
}

// ---------------------------------------------------------------------------
// Value-level wrappers. Build a scratch graph, run the op, return plain
// tensors. Handy for tests and for code that streams without gradients.
// ---------------------------------------------------------------------------

template <typename T>
TokenVar lift(Graph<T>& g, const TokenMap<T>& m) {
    m.validate();
    return TokenVar{g.input(m.tokens), m.h, m.w};
}

template <typename T>
std::pair<TokenMap<T>, Tensor<T>> cross_attention(const TokenMap<T>& target,
                                                  const TokenMap<T>& context,
                                                  const FusionWeights<T>& w) {
    Graph<T> g;
    FusionVars wv = lift(g, w, false);
    AttentionResult<T> r = cross_attention(g, lift(g, target), lift(g, context), wv);
    return {TokenMap<T>(g.val(r.out), target.h, target.w), g.val(r.attn)};
}

template <typename T>
std::vector<Tensor<T>> hierarchical_contextualization(const TokenMap<T>& context,
                                                      const FusionWeights<T>& w) {
    Graph<T> g;
    FusionVars wv = lift(g, w, false);
    std::vector<Var> levels = hierarchical_contextualization(g, lift(g, context), wv);
    std::vector<Tensor<T>> out;
    for (Var v : levels) out.push_back(g.val(v));
    return out;
}

template <typename T>
Tensor<T> gated_aggregation(const std::vector<Tensor<T>>& levels, const TokenMap<T>& context,
                            const FusionWeights<T>& w) {
    Graph<T> g;
    FusionVars wv = lift(g, w, false);
    std::vector<Var> lv;
    for (const auto& t : levels) lv.push_back(g.input(t));
    return g.val(gated_aggregation(g, lv, lift(g, context), wv));
}

template <typename T>
TokenMap<T> focal_modulation(const TokenMap<T>& target, const TokenMap<T>& context,
                             const FusionWeights<T>& w) {
    Graph<T> g;
    FusionVars wv = lift(g, w, false);
    Var out = focal_modulation(g, lift(g, target), lift(g, context), wv);
    return TokenMap<T>(g.val(out), target.h, target.w);
}

template <typename T>
std::pair<TokenMap<T>, Tensor<T>> modulated_cross_attention(const TokenMap<T>& target,
                                                            const TokenMap<T>& context,
                                                            const FusionWeights<T>& w) {
    Graph<T> g;
    FusionVars wv = lift(g, w, false);
    AttentionResult<T> r = modulated_cross_attention(g, lift(g, target), lift(g, context), wv);
    return {TokenMap<T>(g.val(r.out), target.h, target.w), g.val(r.attn)};
}

}  // namespace mavos
