#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mavos/eltt.hpp"
#include "mavos/segmenter.hpp"

namespace mavos::gradcheck {

// Central-difference verification of the tape's analytic gradients. The
// driver owns the nudge-and-rebuild loop; callers describe the objective as
// a closure that constructs it on a fresh graph each time, reading the leaf
// tensors at their current values.

// One leaf to differentiate against. The tensor lives outside any graph and
// is perturbed in place between rebuilds.
template <typename T>
struct Leaf {
    std::string name;
    Tensor<T>* tensor;
};

// Builds the objective and returns the scalar root plus the graph Vars
// bound to the leaves, in leaf order.
template <typename T>
using BuildFn = std::function<std::pair<Var, std::vector<Var>>(Graph<T>&)>;

struct CoordRecord {
    std::string leaf;
    int64_t index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel = 0.0;
};

struct CheckResult {
    double max_rel = 0.0;
    int64_t coords = 0;
    CoordRecord worst;
};

// Error relative to the larger magnitude, floored so a pair of near-zero
// values does not divide noise by noise.
inline double rel_error(double a, double n) {
    double denom = std::max(std::max(std::abs(a), std::abs(n)), 1e-6);
    return std::abs(a - n) / denom;
}

// Checks d(objective)/d(leaf) against (f(x+h) - f(x-h)) / 2h for every
// listed coordinate. `max_coords` > 0 strides through large leaves instead
// of visiting every entry. `corrupt` shifts one analytic value before the
// comparison; the negative-control test uses it to prove a broken backward
// would be caught.
template <typename T>
CheckResult check(const std::vector<Leaf<T>>& leaves, const BuildFn<T>& build, double h = 1e-5,
                  int64_t max_coords = -1, double corrupt = 0.0) {
    std::vector<Tensor<T>> analytic;
    {
        Graph<T> g;
        auto [root, vars] = build(g);
        if (vars.size() != leaves.size()) {
            throw UsageError("gradient check bound " + std::to_string(vars.size()) +
                             " vars for " + std::to_string(leaves.size()) + " leaves");
        }
        g.backward(root);
        for (Var v : vars) analytic.push_back(g.grad(v));
    }
    if (corrupt != 0.0 && !analytic.empty() && analytic[0].numel() > 0) {
        analytic[0][0] += static_cast<T>(corrupt);
    }

    auto eval = [&]() -> double {
        Graph<T> g;
        auto [root, vars] = build(g);
        (void)vars;
        return static_cast<double>(g.val(root)[0]);
    };

    CheckResult r;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor<T>& t = *leaves[li].tensor;
        int64_t n = t.numel();
        int64_t step = 1;
        if (max_coords > 0 && n > max_coords) step = (n + max_coords - 1) / max_coords;
        for (int64_t i = 0; i < n; i += step) {
            T keep = t[i];
            t[i] = static_cast<T>(keep + h);
            double plus = eval();
            t[i] = static_cast<T>(keep - h);
            double minus = eval();
            t[i] = keep;
            double numeric = (plus - minus) / (2.0 * h);
            double a = static_cast<double>(analytic[li][i]);
            double rel = rel_error(a, numeric);
            ++r.coords;
            if (rel > r.max_rel) {
                r.max_rel = rel;
                r.worst = {leaves[li].name, i, a, numeric, rel};
            }
        }
    }
    return r;
}

struct ComponentReport {
    std::string name;
    double max_rel = 0.0;
    int64_t coords = 0;
    bool pass = false;
};

struct Report {
    double tol = 1e-4;
    std::vector<ComponentReport> components;

    bool all_pass() const {
        for (const auto& c : components) {
            if (!c.pass) return false;
        }
        return !components.empty();
    }
};

namespace detail {

template <typename T>
Tensor<T> rand_tensor(const std::vector<int>& shape, Rng& rng, double scale = 0.5) {
    Tensor<T> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-scale, scale));
    return t;
}

// Frobenius inner product with a fixed random direction. Reducing with a
// plain sum would feed an all-ones upstream gradient into every op, which
// lets transposition mistakes cancel; a generic direction does not. The
// result is divided by the element count to keep the objective O(1):
// central differences measure (f(x+h)-f(x-h)) and their cancellation noise
// grows with |f|, which would swamp coordinates whose true gradient is an
// exact zero (key biases, for one, which row-invariant softmax ignores).
template <typename T>
Var project(Graph<T>& g, Var x, Rng& rng) {
    Tensor<T> dir = rand_tensor<T>(g.val(x).shape(), rng, 1.0);
    Var s = g.sum_all(g.mul(x, g.input(std::move(dir))));
    return g.scale(s, static_cast<T>(1.0 / static_cast<double>(g.val(x).numel())));
}

template <typename T>
void add_leaves(Params<T>& ps, std::vector<Leaf<T>>& out) {
    for (auto& [name, t] : ps.items) out.push_back({name, t});
}

}  // namespace detail

// Runs the full component suite: each fusion stage in isolation, the block
// stack at the requested depth, and the training loss. Every component
// rebuilds from the same seed, so a report is reproducible.
template <typename T>
Report run_suite(uint64_t seed, int depth, double tol = 1e-4, double corrupt = 0.0) {
    if (depth < 1) throw ConfigError("gradient check depth must be >= 1");
    Report rep;
    rep.tol = tol;

    const int d = 6;
    const int levels = 2;
    const int side = 4;
    const int tokens = side * side;

    auto add = [&](const std::string& name, const CheckResult& r) {
        rep.components.push_back({name, r.max_rel, r.coords, r.max_rel < tol});
    };

    // Linear projection through GeLU, weights and input both checked.
    {
        Rng rng(seed);
        LinearProjection<T> lin = make_linear<T>(d, d, rng);
        Tensor<T> x = detail::rand_tensor<T>({tokens, d}, rng);
        Rng dir = rng.split(1);
        std::vector<Leaf<T>> leaves{{"w", &lin.weight}, {"b", &lin.bias}, {"x", &x}};
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            Var wv = g.input(lin.weight, true);
            Var bv = g.input(lin.bias, true);
            Var xv = g.input(x, true);
            Rng d2 = dir;
            return {detail::project(g, g.gelu(g.linear(xv, wv, bv)), d2), {wv, bv, xv}};
        }, 1e-5, -1, corrupt);
        add("linear+gelu", r);
        corrupt = 0.0;  // the hook poisons exactly one component
    }

    // Depthwise 3x3 over one grid.
    {
        Rng rng(seed + 1);
        Tensor<T> x = detail::rand_tensor<T>({side, side, d}, rng);
        Tensor<T> k = detail::rand_tensor<T>({3, 3, d}, rng);
        Rng dir = rng.split(1);
        std::vector<Leaf<T>> leaves{{"x", &x}, {"k", &k}};
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            Var xv = g.input(x, true);
            Var kv = g.input(k, true);
            Rng d2 = dir;
            return {detail::project(g, g.depthwise_conv(xv, kv), d2), {xv, kv}};
        });
        add("depthwise-conv", r);
    }

    // Row standardization. Its backward couples every entry of a row through
    // the mean and variance, so a generic projection direction matters here.
    {
        Rng rng(seed + 7);
        Tensor<T> x = detail::rand_tensor<T>({5, d}, rng, 1.5);
        Rng dir = rng.split(1);
        std::vector<Leaf<T>> leaves{{"x", &x}};
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            Var xv = g.input(x, true);
            Rng d2 = dir;
            return {detail::project(g, g.layer_norm_rows(xv), d2), {xv}};
        });
        add("layer-norm", r);
    }

    // Plain cross attention, all projection weights plus both token maps.
    {
        Rng rng(seed + 2);
        FusionWeights<T> w = make_fusion_weights<T>(d, levels, rng);
        Tensor<T> tgt = detail::rand_tensor<T>({tokens, d}, rng);
        Tensor<T> ctx = detail::rand_tensor<T>({2 * tokens, d}, rng);
        Rng dir = rng.split(1);
        Params<T> ps;
        collect_params(w, ps, "ca");
        std::vector<Leaf<T>> leaves;
        detail::add_leaves(ps, leaves);
        leaves.push_back({"target", &tgt});
        leaves.push_back({"context", &ctx});
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            FusionVars wv = lift(g, w, true);
            std::vector<Var> vars;
            collect_vars(wv, vars);
            TokenVar t{g.input(tgt, true), side, side};
            TokenVar c{g.input(ctx, true), side, side};
            vars.push_back(t.v);
            vars.push_back(c.v);
            Rng d2 = dir;
            return {detail::project(g, cross_attention(g, t, c, wv).out, d2), vars};
        });
        add("cross-attention", r);
    }

    // Pyramid plus gated sum on a single grid.
    {
        Rng rng(seed + 3);
        FusionWeights<T> w = make_fusion_weights<T>(d, levels, rng);
        Tensor<T> ctx = detail::rand_tensor<T>({tokens, d}, rng);
        Rng dir = rng.split(1);
        Params<T> ps;
        collect_params(w, ps, "hc");
        std::vector<Leaf<T>> leaves;
        detail::add_leaves(ps, leaves);
        leaves.push_back({"context", &ctx});
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            FusionVars wv = lift(g, w, true);
            std::vector<Var> vars;
            collect_vars(wv, vars);
            TokenVar c{g.input(ctx, true), side, side};
            vars.push_back(c.v);
            std::vector<Var> lv = hierarchical_contextualization(g, c, wv);
            Var out = gated_aggregation(g, lv, c, wv);
            Rng d2 = dir;
            return {detail::project(g, out, d2), vars};
        });
        add("pyramid+gates", r);
    }

    // Full modulated cross attention with a two-grid context, which also
    // exercises the per-grid chunking.
    {
        Rng rng(seed + 4);
        FusionWeights<T> w = make_fusion_weights<T>(d, levels, rng);
        Tensor<T> tgt = detail::rand_tensor<T>({tokens, d}, rng);
        Tensor<T> ctx = detail::rand_tensor<T>({2 * tokens, d}, rng);
        Rng dir = rng.split(1);
        Params<T> ps;
        collect_params(w, ps, "mca");
        std::vector<Leaf<T>> leaves;
        detail::add_leaves(ps, leaves);
        leaves.push_back({"target", &tgt});
        leaves.push_back({"context", &ctx});
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            FusionVars wv = lift(g, w, true);
            std::vector<Var> vars;
            collect_vars(wv, vars);
            TokenVar t{g.input(tgt, true), side, side};
            TokenVar c{g.input(ctx, true), side, side};
            vars.push_back(t.v);
            vars.push_back(c.v);
            Rng d2 = dir;
            return {detail::project(g, modulated_cross_attention(g, t, c, wv).out, d2), vars};
        });
        add("modulated-cross-attention", r);
    }

    // The block stack at the requested depth, previous-frame features and a
    // two-slot context supplied, every block parameter checked.
    {
        Rng rng(seed + 5);
        std::vector<BlockWeights<T>> blocks;
        Params<T> ps;
        for (int b = 0; b < depth; ++b) {
            blocks.push_back(make_block_weights<T>(d, levels, 2, rng));
        }
        for (int b = 0; b < depth; ++b) {
            collect_params(blocks[b], ps, "block" + std::to_string(b));
        }
        Tensor<T> vis = detail::rand_tensor<T>({tokens, d}, rng);
        Tensor<T> id = detail::rand_tensor<T>({tokens, d}, rng);
        Tensor<T> vctx = detail::rand_tensor<T>({2 * tokens, d}, rng);
        Tensor<T> ictx = detail::rand_tensor<T>({2 * tokens, d}, rng);
        std::vector<Tensor<T>> pv, pi;
        for (int b = 0; b < depth; ++b) {
            pv.push_back(detail::rand_tensor<T>({tokens, d}, rng));
            pi.push_back(detail::rand_tensor<T>({tokens, d}, rng));
        }
        Rng dir = rng.split(1);
        std::vector<Leaf<T>> leaves;
        detail::add_leaves(ps, leaves);
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            std::vector<BlockVars> bv;
            std::vector<Var> vars;
            for (int b = 0; b < depth; ++b) {
                bv.push_back(lift(g, blocks[b], true));
                collect_vars(bv.back(), vars);
            }
            TokenVar visv{g.input(vis), side, side};
            TokenVar idv{g.input(id), side, side};
            TokenVar vc{g.input(vctx), side, side};
            TokenVar ic{g.input(ictx), side, side};
            std::vector<TokenVar> pvv, piv;
            for (int b = 0; b < depth; ++b) {
                pvv.push_back({g.input(pv[b]), side, side});
                piv.push_back({g.input(pi[b]), side, side});
            }
            TrunkResult<T> tr = trunk_forward(g, bv, visv, idv, &pvv, &piv, vc, ic);
            Rng d2 = dir;
            Var s = g.add(detail::project(g, tr.vis_out.v, d2), detail::project(g, tr.id_out.v, d2));
            return {s, vars};
        });
        add("block-stack-depth" + std::to_string(depth), r);
    }

    // Training loss against its logits.
    {
        Rng rng(seed + 6);
        Tensor<T> logits = detail::rand_tensor<T>({8, 8, 3}, rng, 1.5);
        Tensor<T> targets({8, 8, 3});
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                targets.at3(y, x, static_cast<int>(rng.uniform_int(3))) = T(1);
            }
        }
        std::vector<Leaf<T>> leaves{{"logits", &logits}};
        auto r = check<T>(leaves, [&](Graph<T>& g) -> std::pair<Var, std::vector<Var>> {
            Var lv = g.input(logits, true);
            return {segmentation_loss(g, lv, targets), {lv}};
        });
        add("segmentation-loss", r);
    }

    return rep;
}

}  // namespace mavos::gradcheck
