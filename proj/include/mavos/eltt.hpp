#pragma once

#include <vector>

#include "mavos/fusion.hpp"
#include "mavos/memory.hpp"

namespace mavos {

// One propagation block. The visual branch runs three attention stages
// (short-term over the previous frame, long-term over the memory bank,
// self over the current frame), each added back as a residual, then a
// feed-forward pair. The identity branch computes no attention of its own:
// every stage reuses the visual attention map against an identity value
// projection.
template <typename T>
struct BlockWeights {
    FusionWeights<T> short_term;
    FusionWeights<T> long_term;
    FusionWeights<T> self_attn;
    LinearProjection<T> id_short;  // D -> D identity values per stage
    LinearProjection<T> id_long;
    LinearProjection<T> id_self;
    LinearProjection<T> ff1;  // D -> ff
    LinearProjection<T> ff2;  // ff -> D
};

template <typename T>
BlockWeights<T> make_block_weights(int d, int levels, int ff_mult, Rng& rng) {
    BlockWeights<T> b;
    b.short_term = make_fusion_weights<T>(d, levels, rng);
    b.long_term = make_fusion_weights<T>(d, levels, rng);
    b.self_attn = make_fusion_weights<T>(d, levels, rng);
    b.id_short = make_linear<T>(d, d, rng);
    b.id_long = make_linear<T>(d, d, rng);
    b.id_self = make_linear<T>(d, d, rng);
    b.ff1 = make_linear<T>(d, d * ff_mult, rng);
    b.ff2 = make_linear<T>(d * ff_mult, d, rng);
    return b;
}

template <typename T>
void collect_params(BlockWeights<T>& b, Params<T>& out, const std::string& prefix) {
    collect_params(b.short_term, out, prefix + ".short");
    collect_params(b.long_term, out, prefix + ".long");
    collect_params(b.self_attn, out, prefix + ".self");
    collect_params(b.id_short, out, prefix + ".id_short");
    collect_params(b.id_long, out, prefix + ".id_long");
    collect_params(b.id_self, out, prefix + ".id_self");
    collect_params(b.ff1, out, prefix + ".ff1");
    collect_params(b.ff2, out, prefix + ".ff2");
}

struct BlockVars {
    FusionVars st, lt, sa;
    Var idsw, idsb, idlw, idlb, idfw, idfb;
    Var ff1w, ff1b, ff2w, ff2b;
};

template <typename T>
BlockVars lift(Graph<T>& g, const BlockWeights<T>& b, bool requires_grad) {
    BlockVars v;
    v.st = lift(g, b.short_term, requires_grad);
    v.lt = lift(g, b.long_term, requires_grad);
    v.sa = lift(g, b.self_attn, requires_grad);
    v.idsw = g.input(b.id_short.weight, requires_grad);
    v.idsb = g.input(b.id_short.bias, requires_grad);
    v.idlw = g.input(b.id_long.weight, requires_grad);
    v.idlb = g.input(b.id_long.bias, requires_grad);
    v.idfw = g.input(b.id_self.weight, requires_grad);
    v.idfb = g.input(b.id_self.bias, requires_grad);
    v.ff1w = g.input(b.ff1.weight, requires_grad);
    v.ff1b = g.input(b.ff1.bias, requires_grad);
    v.ff2w = g.input(b.ff2.weight, requires_grad);
    v.ff2b = g.input(b.ff2.bias, requires_grad);
    return v;
}

inline void collect_vars(const BlockVars& b, std::vector<Var>& out) {
    collect_vars(b.st, out);
    collect_vars(b.lt, out);
    collect_vars(b.sa, out);
    out.insert(out.end(), {b.idsw, b.idsb, b.idlw, b.idlb, b.idfw, b.idfb, b.ff1w, b.ff1b, b.ff2w,
                           b.ff2b});
}

// Attention maps a block computed this frame, exposed so tests can check the
// identity branch really rode along on them.
struct BlockTrace {
    Var attn_short;  // invalid on the first frame (no previous frame)
    Var attn_long;
    Var attn_self;
};

// Identity features carried through a cached visual attention map. Throws if
// the map was never computed this frame.
template <typename T>
Var id_reuse(Graph<T>& g, Var attn, Var id_context, Var proj_w, Var proj_b) {
    if (!attn.valid()) {
        throw UsageError("identity branch needs the visual attention map cached this frame");
    }
    return g.matmul(attn, g.linear(id_context, proj_w, proj_b));
}

template <typename T>
struct BlockIO {
    TokenVar vis;
    TokenVar id;
};

// prev_vis/prev_id are the previous frame's features at this depth; pass
// nullptr on the first frame after init, which skips the short-term stage on
// both branches.
//
// Every stage reads standardized features (pre-norm residual layout) while the
// residual stream itself stays raw. Without this the frame-to-frame recurrence
// has no bound on its gain: features fed back through the previous frame and
// the memory bank grow geometrically over long rollouts and training diverges
// once unrolls get deep.
template <typename T>
BlockIO<T> block_forward(Graph<T>& g, TokenVar vis, TokenVar id, const TokenVar* prev_vis,
                         const TokenVar* prev_id, const TokenVar& vis_ctx, const TokenVar& id_ctx,
                         const BlockVars& w, BlockTrace* trace = nullptr) {
    BlockTrace tr;
    auto norm = [&g](const TokenVar& t) { return TokenVar{g.layer_norm_rows(t.v), t.h, t.w}; };

    if (prev_vis != nullptr) {
        if (prev_id == nullptr) {
            throw UsageError("block_forward: previous visual features without identity features");
        }
        AttentionResult<T> s = cross_attention(g, norm(vis), norm(*prev_vis), w.st);
        tr.attn_short = s.attn;
        vis.v = g.add(vis.v, s.out);
        id.v = g.add(id.v, id_reuse(g, s.attn, g.layer_norm_rows(prev_id->v), w.idsw, w.idsb));
    }

    AttentionResult<T> l = modulated_cross_attention(g, norm(vis), norm(vis_ctx), w.lt);
    tr.attn_long = l.attn;
    vis.v = g.add(vis.v, l.out);
    id.v = g.add(id.v, id_reuse(g, l.attn, g.layer_norm_rows(id_ctx.v), w.idlw, w.idlb));

    TokenVar nv = norm(vis);
    AttentionResult<T> f = cross_attention(g, nv, nv, w.sa);
    tr.attn_self = f.attn;
    Var id_entry = g.layer_norm_rows(id.v);
    vis.v = g.add(vis.v, f.out);
    id.v = g.add(id.v, id_reuse(g, f.attn, id_entry, w.idfw, w.idfb));

    Var ff = g.linear(g.gelu(g.linear(g.layer_norm_rows(vis.v), w.ff1w, w.ff1b)), w.ff2w, w.ff2b);
    vis.v = g.add(vis.v, ff);

    if (trace != nullptr) *trace = tr;
    return {vis, id};
}

template <typename T>
struct TrunkResult {
    TokenVar vis_out;
    TokenVar id_out;
    // Per-depth features to carry into the next frame's short-term stage:
    // the visual input each block saw and the identity output it produced.
    std::vector<TokenVar> block_vis_in;
    std::vector<TokenVar> block_id_out;
    std::vector<BlockTrace> traces;
};

// Run the block stack. All blocks share the same memory context within a
// frame; each block has its own weights.
template <typename T>
TrunkResult<T> trunk_forward(Graph<T>& g, const std::vector<BlockVars>& blocks, TokenVar vis,
                             TokenVar id, const std::vector<TokenVar>* prev_vis,
                             const std::vector<TokenVar>* prev_id, const TokenVar& vis_ctx,
                             const TokenVar& id_ctx) {
    if (prev_vis != nullptr && prev_vis->size() != blocks.size()) {
        throw UsageError("trunk_forward: previous-frame features do not match block count");
    }
    TrunkResult<T> r;
    for (size_t b = 0; b < blocks.size(); ++b) {
        r.block_vis_in.push_back(vis);
        const TokenVar* pv = prev_vis ? &(*prev_vis)[b] : nullptr;
        const TokenVar* pi = prev_id ? &(*prev_id)[b] : nullptr;
        BlockTrace tr;
        BlockIO<T> io = block_forward(g, vis, id, pv, pi, vis_ctx, id_ctx, blocks[b], &tr);
        vis = io.vis;
        id = io.id;
        r.block_id_out.push_back(id);
        r.traces.push_back(tr);
    }
    r.vis_out = vis;
    r.id_out = id;
    return r;
}

}  // namespace mavos
