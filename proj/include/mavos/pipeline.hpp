#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "mavos/dataset_io.hpp"
#include "mavos/segmenter.hpp"

namespace mavos {

struct TrainConfig {
    int steps = 600;
    int unroll = 8;        // supervised frames per clip including the reference
    int max_burnin = 24;   // upper bound on unsupervised state-maturing frames
    int delta = 2;         // memory update period while training
    double lr = 1e-3;
    double beta1 = 0.9;    // Adam moment decays
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    MemoryPolicy policy = MemoryPolicy::mca;
    int window = 4;
    uint64_t seed = 7;
    std::string loss_csv;  // per-step loss log, written when non-empty
    int log_every = 25;

    void validate() const {
        if (steps <= 0 || unroll < 2 || delta <= 0 || max_burnin < 0) {
            throw ConfigError("training needs steps > 0, unroll >= 2, delta > 0, max_burnin >= 0");
        }
        if (lr <= 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0 ||
            clip_norm <= 0) {
            throw ConfigError("training needs lr > 0, betas in [0, 1), eps > 0, clip_norm > 0");
        }
    }
};

struct TrainReport {
    std::vector<double> losses;  // one entry per executed step
    long skipped = 0;            // clips dropped for non-finite losses
};

namespace detail {

// Fixed-format float for logs that must be byte-identical across runs.
inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// Stream short synthetic clips and descend the segmentation loss with Adam.
// Each clip runs on one graph, so gradients flow back through the memory
// bank merges and the previous-frame features across the whole unroll. The
// reference frame comes with its ground truth; every later frame is
// predicted and scored. Clips differ wildly from step to step, so the
// per-parameter scaling of Adam matters: plain momentum SGD stalls here.
template <typename T>
TrainReport train(Model<T>& m, const TrainConfig& tc, std::ostream* log = nullptr) {
    tc.validate();
    Params<T> ps;
    collect_params(m, ps);
    std::vector<Tensor<T>> moment1, moment2;
    for (const auto& [name, t] : ps.items) {
        moment1.push_back(Tensor<T>(t->shape()));
        moment2.push_back(Tensor<T>(t->shape()));
    }

    std::ofstream csv;
    if (!tc.loss_csv.empty()) {
        csv.open(tc.loss_csv, std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("cannot open '" + tc.loss_csv + "' for writing");
        csv << "step,loss\n";
    }

    Rng root(tc.seed);
    TrainReport report;
    long updates = 0;
    for (int step = 0; step < tc.steps; ++step) {
        Rng r = root.split(static_cast<uint64_t>(step) + 1);
        SynthConfig sc;
        sc.grid = m.cfg.grid;
        // At least two objects whenever the model allows it: single-object
        // clips teach segmentation but exert no pressure on identity
        // separation, which is the hard part.
        sc.n_objects = m.cfg.n_max < 2
                           ? 1
                           : 2 + static_cast<int>(r.uniform_int(
                                     static_cast<uint64_t>(m.cfg.n_max - 1)));
        sc.kind = static_cast<SceneKind>(r.uniform_int(3));
        sc.seed = r.uniform_int(uint64_t(1) << 62);
        long offset = static_cast<long>(r.uniform_int(120));
        // Burn-in depth ramps up over the first half of the run, so early
        // steps supervise shallow, informative states before the model ever
        // sees the deep ones evaluation produces.
        long cap = tc.max_burnin;
        if (tc.steps > 1) cap = std::min<long>(cap, (2L * tc.max_burnin * step) / tc.steps);
        long burnin = cap > 0 ? static_cast<long>(r.uniform_int(cap + 1)) : 0;
        sc.frames = offset + burnin + tc.unroll;

        StreamState<T> st;
        StreamOptions opt{tc.policy, tc.delta, tc.window};

        MaskSet ref_masks = render_masks(sc, offset);
        std::vector<bool> tracked(static_cast<size_t>(sc.n_objects));
        for (int o = 0; o < sc.n_objects; ++o) tracked[o] = !ref_masks.objects[o].empty_mask();

        // The reference and a random stretch of burn-in frames run exactly
        // like inference, on throwaway graphs: they mature the recurrent
        // state (previous-frame features, merged memory) without growing the
        // training tape. Gradients start at the supervised window, which
        // therefore sees states as deep as evaluation will produce, not just
        // freshly initialized ones.
        Graph<T> g;
        ModelVars mv;
        Var total;
        double loss = 0.0;
        bool usable = false;
        try {
            {
                Graph<T> gs;
                ModelVars mvs = lift(gs, m, false);
                init_stream(gs, mvs, m, st, frame_to_tensor<T>(render_pixels(sc, offset)),
                            ref_masks, opt);
            }
            for (long i = 1; i <= burnin; ++i) {
                Graph<T> gs;
                ModelVars mvs = lift(gs, m, false);
                segment_frame(gs, mvs, m, st, i,
                              frame_to_tensor<T>(render_pixels(sc, offset + i)));
            }

            mv = lift(g, m, true);
            for (int k = 1; k < tc.unroll; ++k) {
                long i = burnin + k;
                FrameResult<T> fr = segment_frame(g, mv, m, st, i,
                                                  frame_to_tensor<T>(render_pixels(sc, offset + i)));
                Tensor<T> targets =
                    make_targets<T>(render_masks(sc, offset + i), m.cfg.n_max, &tracked);
                Var l = segmentation_loss(g, fr.logits, targets);
                total = total.valid() ? g.add(total, l) : l;
            }
            total = g.scale(total, static_cast<T>(1.0 / (tc.unroll - 1)));
            loss = static_cast<double>(g.val(total)[0]);
            usable = std::isfinite(loss);
        } catch (const NumericError&) {
            usable = false;
        }

        // A rare clip can still overflow the recurrence mid-training. One
        // such clip teaches nothing (its gradients are garbage), so drop it;
        // a steady stream of them means the run has genuinely diverged.
        if (!usable) {
            ++report.skipped;
            if (report.skipped * 10 > tc.steps) {
                throw NumericError("training diverged: " + std::to_string(report.skipped) +
                                   " of " + std::to_string(step + 1) +
                                   " clips produced non-finite losses");
            }
            if (log != nullptr) {
                (*log) << "step " << step << " skipped (non-finite loss)\n";
            }
            continue;
        }
        g.backward(total);

        std::vector<Var> vars;
        collect_vars(mv, vars);
        if (vars.size() != ps.items.size()) {
            throw UsageError("internal: parameter and variable walks disagree");
        }
        double sq = 0;
        for (const Var v : vars) {
            const Tensor<T>& gr = g.grad(v);
            for (int64_t i = 0; i < gr.numel(); ++i) {
                sq += static_cast<double>(gr[i]) * static_cast<double>(gr[i]);
            }
        }
        double norm = std::sqrt(sq);
        double scale = norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;
        double lr = tc.lr;
        if (step >= (tc.steps * 6) / 10) lr *= 0.3;
        if (step >= (tc.steps * 17) / 20) lr *= 0.3;
        ++updates;
        double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(updates));
        double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(updates));
        for (size_t p = 0; p < vars.size(); ++p) {
            const Tensor<T>& gr = g.grad(vars[p]);
            Tensor<T>& m1 = moment1[p];
            Tensor<T>& m2 = moment2[p];
            Tensor<T>& w = *ps.items[p].second;
            for (int64_t i = 0; i < gr.numel(); ++i) {
                double gi = scale * static_cast<double>(gr[i]);
                m1[i] = static_cast<T>(tc.beta1 * m1[i] + (1.0 - tc.beta1) * gi);
                m2[i] = static_cast<T>(tc.beta2 * m2[i] + (1.0 - tc.beta2) * gi * gi);
                double mhat = static_cast<double>(m1[i]) / bc1;
                double vhat = static_cast<double>(m2[i]) / bc2;
                w[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + tc.eps));
            }
        }

        report.losses.push_back(loss);
        if (csv.is_open()) csv << step << "," << detail::fmt_g17(loss) << "\n";
        if (log != nullptr && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
            (*log) << "step " << step << " loss " << detail::fmt_g17(loss) << " grad_norm "
                   << detail::fmt_g17(norm) << "\n";
        }
    }
    if (csv.is_open()) {
        csv.close();
        if (!csv) throw IoError("write to '" + tc.loss_csv + "' failed");
    }
    return report;
}

// Score the model on rendered videos.
template <typename T>
std::vector<VideoScore> evaluate_suite(const Model<T>& m, const std::vector<VideoSpec>& specs,
                                       const StreamOptions& opt, std::ostream* log = nullptr) {
    std::vector<VideoScore> out;
    for (const auto& spec : specs) {
        if (spec.cfg.grid != m.cfg.grid) {
            throw ConfigError("video '" + spec.name + "' is " + std::to_string(spec.cfg.grid) +
                              "px but the model runs at " + std::to_string(m.cfg.grid) + "px");
        }
        VideoScore s = evaluate_video(
            m, spec.name, spec.cfg.frames, spec.cfg.n_objects,
            [&](long t, FramePixels& px, MaskSet& ms) {
                px = render_pixels(spec.cfg, t);
                ms = render_masks(spec.cfg, t);
            },
            opt);
        if (log != nullptr) {
            (*log) << s.name << " J " << detail::fmt_g17(s.jf.j) << " F " << detail::fmt_g17(s.jf.f)
                   << " J&F " << detail::fmt_g17(s.jf.jf) << "\n";
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline double mean_jf(const std::vector<VideoScore>& scores) {
    if (scores.empty()) throw UsageError("no videos were scored");
    double s = 0;
    for (const auto& v : scores) s += v.jf.jf;
    return s / static_cast<double>(scores.size());
}

// Score the model on a stored video container.
template <typename T>
VideoScore evaluate_file(const Model<T>& m, const std::string& path, const StreamOptions& opt,
                         const std::function<void(long, const std::vector<BinMask>&)>& on_pred =
                             {}) {
    DatasetReader rd(path);
    const DatasetHeader& h = rd.header();
    if (h.grid != m.cfg.grid) {
        throw ConfigError("'" + path + "' is " + std::to_string(h.grid) +
                          "px but the model runs at " + std::to_string(m.cfg.grid) + "px");
    }
    return evaluate_video(
        m, h.name.empty() ? path : h.name, h.frames, h.objects,
        [&](long t, FramePixels& px, MaskSet& ms) {
            (void)t;
            rd.read_frame(px, ms);
        },
        opt, on_pred);
}

}  // namespace mavos
