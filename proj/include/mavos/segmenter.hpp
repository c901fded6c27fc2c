#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mavos/eltt.hpp"
#include "mavos/masks.hpp"
#include "mavos/metrics.hpp"
#include "mavos/serialization.hpp"
#include "mavos/synthgen.hpp"

namespace mavos {

// ---- configuration ----

struct ModelConfig {
    int d = 32;        // token feature depth
    int levels = 2;    // focal pyramid levels in each fusion operator
    int grid = 64;     // frame resolution (pixels per side)
    int stride = 16;   // encoder downsampling factor, power of two
    int n_max = 4;     // object capacity
    int blocks = 3;    // propagation blocks
    int ff_mult = 2;   // feed-forward expansion
    bool shared_update = true;  // memory merge reuses block 0 long-term weights
    uint64_t seed = 1;

    int down_stages() const {
        int n = 0;
        for (int s = stride; s > 1; s >>= 1) ++n;
        return n;
    }
    int token_side() const { return grid / stride; }
    int tokens() const { return token_side() * token_side(); }

    void validate() const {
        if (d <= 0 || levels <= 0 || n_max <= 0 || blocks <= 0 || ff_mult <= 0) {
            throw ConfigError("model dims must all be positive");
        }
        if (stride < 2 || (stride & (stride - 1)) != 0) {
            throw ConfigError("encoder stride must be a power of two >= 2, got " +
                              std::to_string(stride));
        }
        if (grid <= 0 || grid % stride != 0) {
            throw ConfigError("grid " + std::to_string(grid) + " must be a positive multiple of " +
                              "stride " + std::to_string(stride));
        }
        if (token_side() < 2) {
            throw ConfigError("grid/stride leaves fewer than 2 tokens per side");
        }
    }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["d"] = c.d;
    j["levels"] = c.levels;
    j["grid"] = c.grid;
    j["stride"] = c.stride;
    j["n_max"] = c.n_max;
    j["blocks"] = c.blocks;
    j["ff_mult"] = c.ff_mult;
    j["shared_update"] = c.shared_update;
    j["seed"] = c.seed;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.d = j.at("d").get<int>();
        c.levels = j.at("levels").get<int>();
        c.grid = j.at("grid").get<int>();
        c.stride = j.at("stride").get<int>();
        c.n_max = j.at("n_max").get<int>();
        c.blocks = j.at("blocks").get<int>();
        c.ff_mult = j.at("ff_mult").get<int>();
        c.shared_update = j.at("shared_update").get<bool>();
        c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config is malformed: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- encoder ----

// Stack of stride-2 3x3 convolutions down to the token grid. GeLU after
// every stage but the last; the last stage emits the token features
// directly. Intermediate maps are kept for the decoder's skip connections.
template <typename T>
struct EncoderWeights {
    std::vector<Tensor<T>> kernel;  // [3 x 3 x ci x co]
    std::vector<Tensor<T>> bias;    // [co]
};

inline int encoder_channels(const ModelConfig& cfg, int stage) {
    if (stage == cfg.down_stages() - 1) return cfg.d;
    return std::min(cfg.d, 8 << stage);
}

template <typename T>
EncoderWeights<T> make_encoder(const ModelConfig& cfg, Rng& rng) {
    EncoderWeights<T> e;
    int ci = 3;
    for (int i = 0; i < cfg.down_stages(); ++i) {
        int co = encoder_channels(cfg, i);
        Tensor<T> k({3, 3, ci, co});
        double bound = std::sqrt(6.0 / (9.0 * ci + 9.0 * co));
        for (int64_t n = 0; n < k.numel(); ++n) k[n] = static_cast<T>(rng.uniform(-bound, bound));
        e.kernel.push_back(std::move(k));
        e.bias.push_back(Tensor<T>({co}));
        ci = co;
    }
    return e;
}

template <typename T>
void collect_params(EncoderWeights<T>& e, Params<T>& out, const std::string& prefix) {
    for (size_t i = 0; i < e.kernel.size(); ++i) {
        out.add(prefix + ".conv" + std::to_string(i) + ".weight", e.kernel[i]);
        out.add(prefix + ".conv" + std::to_string(i) + ".bias", e.bias[i]);
    }
}

struct EncoderVars {
    std::vector<Var> k, b;
};

template <typename T>
EncoderVars lift(Graph<T>& g, const EncoderWeights<T>& e, bool requires_grad) {
    EncoderVars v;
    for (size_t i = 0; i < e.kernel.size(); ++i) {
        v.k.push_back(g.input(e.kernel[i], requires_grad));
        v.b.push_back(g.input(e.bias[i], requires_grad));
    }
    return v;
}

inline void collect_vars(const EncoderVars& v, std::vector<Var>& out) {
    for (size_t i = 0; i < v.k.size(); ++i) {
        out.push_back(v.k[i]);
        out.push_back(v.b[i]);
    }
}

template <typename T>
struct EncodeResult {
    TokenVar tokens;          // [T x D]
    std::vector<Var> stages;  // per-stage maps, coarse last; stages.back() is the token map
};

template <typename T>
EncodeResult<T> encode(Graph<T>& g, const EncoderVars& v, Var image, const ModelConfig& cfg) {
    const Tensor<T>& iv = g.val(image);
    if (iv.rank() != 3 || iv.dim(0) != cfg.grid || iv.dim(1) != cfg.grid || iv.dim(2) != 3) {
        throw DimensionError("encoder expects a " + std::to_string(cfg.grid) + "x" +
                             std::to_string(cfg.grid) + "x3 image, got " + iv.shape_str());
    }
    EncodeResult<T> r;
    Var x = image;
    int n = cfg.down_stages();
    for (int i = 0; i < n; ++i) {
        x = g.conv2d(x, v.k[i], v.b[i], 2, 1);
        if (i + 1 < n) x = g.gelu(x);
        r.stages.push_back(x);
    }
    int side = cfg.token_side();
    r.tokens = TokenVar{g.reshape(x, {side * side, cfg.d}), side, side};
    return r;
}

// ---- decoder ----

// Pointwise refinement back up to pixel resolution. Each stage doubles the
// resolution and concatenates the encoder map of the same resolution (the
// raw image at full resolution) before its linear, so boundaries are
// localized from high-resolution evidence rather than tokens alone.
template <typename T>
struct DecoderWeights {
    LinearProjection<T> fuse;             // 2D -> D over concatenated visual+identity tokens
    std::vector<LinearProjection<T>> up;  // per upsample stage
    LinearProjection<T> out;              // final width -> n_max + 1 logits
};

inline int decoder_width(const ModelConfig& cfg, int stage) {
    return std::max(8, cfg.d >> (stage + 1));
}

inline int decoder_skip_channels(const ModelConfig& cfg, int stage) {
    int n = cfg.down_stages();
    if (stage == n - 1) return 3;  // full resolution: the input image
    return encoder_channels(cfg, n - 2 - stage);
}

template <typename T>
DecoderWeights<T> make_decoder(const ModelConfig& cfg, Rng& rng) {
    DecoderWeights<T> d;
    d.fuse = make_linear<T>(2 * cfg.d, cfg.d, rng);
    int w = cfg.d;
    for (int i = 0; i < cfg.down_stages(); ++i) {
        int wi = decoder_width(cfg, i);
        d.up.push_back(make_linear<T>(w + decoder_skip_channels(cfg, i), wi, rng));
        w = wi;
    }
    d.out = make_linear<T>(w, cfg.n_max + 1, rng);
    return d;
}

template <typename T>
void collect_params(DecoderWeights<T>& d, Params<T>& out, const std::string& prefix) {
    collect_params(d.fuse, out, prefix + ".fuse");
    for (size_t i = 0; i < d.up.size(); ++i) {
        collect_params(d.up[i], out, prefix + ".up" + std::to_string(i));
    }
    collect_params(d.out, out, prefix + ".out");
}

struct DecoderVars {
    Var fw, fb;
    std::vector<Var> uw, ub;
    Var ow, ob;
};

template <typename T>
DecoderVars lift(Graph<T>& g, const DecoderWeights<T>& d, bool requires_grad) {
    DecoderVars v;
    v.fw = g.input(d.fuse.weight, requires_grad);
    v.fb = g.input(d.fuse.bias, requires_grad);
    for (size_t i = 0; i < d.up.size(); ++i) {
        v.uw.push_back(g.input(d.up[i].weight, requires_grad));
        v.ub.push_back(g.input(d.up[i].bias, requires_grad));
    }
    v.ow = g.input(d.out.weight, requires_grad);
    v.ob = g.input(d.out.bias, requires_grad);
    return v;
}

inline void collect_vars(const DecoderVars& v, std::vector<Var>& out) {
    out.push_back(v.fw);
    out.push_back(v.fb);
    for (size_t i = 0; i < v.uw.size(); ++i) {
        out.push_back(v.uw[i]);
        out.push_back(v.ub[i]);
    }
    out.push_back(v.ow);
    out.push_back(v.ob);
}

template <typename T>
Var decode(Graph<T>& g, const DecoderVars& v, const TokenVar& vis, const TokenVar& id,
           const std::vector<Var>& stages, Var image, const ModelConfig& cfg) {
    Var fused = g.gelu(g.linear(g.concat_cols(vis.v, id.v), v.fw, v.fb));
    int side = cfg.token_side();
    Var x = g.reshape(fused, {side, side, cfg.d});
    int n = cfg.down_stages();
    int w = cfg.d;
    for (int i = 0; i < n; ++i) {
        x = g.upsample2x(x);
        side *= 2;
        Var skip = (i == n - 1) ? image : stages[n - 2 - i];
        Var flat = g.reshape(x, {side * side, w});
        Var sflat = g.reshape(skip, {side * side, decoder_skip_channels(cfg, i)});
        w = decoder_width(cfg, i);
        x = g.reshape(g.gelu(g.linear(g.concat_cols(flat, sflat), v.uw[i], v.ub[i])),
                      {side, side, w});
    }
    Var logits = g.linear(g.reshape(x, {side * side, w}), v.ow, v.ob);
    return g.reshape(logits, {cfg.grid, cfg.grid, cfg.n_max + 1});
}

// ---- the model ----

template <typename T>
struct Model {
    ModelConfig cfg;
    EncoderWeights<T> encoder;
    Tensor<T> id_vectors;  // [n_max x D] per-object identity embeddings
    Tensor<T> pos_embed;   // [T x D] added to the tokens of every frame; without it the
                           // trunk is blind to position and cannot keep two
                           // look-alike objects apart
    std::vector<BlockWeights<T>> blocks;
    FusionWeights<T> update;        // dedicated merge weights (idle when shared_update)
    LinearProjection<T> id_update;  // dedicated identity merge projection
    DecoderWeights<T> decoder;
};

template <typename T>
Model<T> make_model(const ModelConfig& cfg) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    m.encoder = make_encoder<T>(cfg, rng);
    m.id_vectors = Tensor<T>({cfg.n_max, cfg.d});
    for (int64_t i = 0; i < m.id_vectors.numel(); ++i) {
        m.id_vectors[i] = static_cast<T>(rng.uniform(-1.0, 1.0));
    }
    m.pos_embed = Tensor<T>({cfg.tokens(), cfg.d});
    for (int64_t i = 0; i < m.pos_embed.numel(); ++i) {
        m.pos_embed[i] = static_cast<T>(rng.uniform(-0.1, 0.1));
    }
    for (int b = 0; b < cfg.blocks; ++b) {
        m.blocks.push_back(make_block_weights<T>(cfg.d, cfg.levels, cfg.ff_mult, rng));
    }
    m.update = make_fusion_weights<T>(cfg.d, cfg.levels, rng);
    m.id_update = make_linear<T>(cfg.d, cfg.d, rng);
    m.decoder = make_decoder<T>(cfg, rng);
    return m;
}

template <typename T>
void collect_params(Model<T>& m, Params<T>& out) {
    collect_params(m.encoder, out, "encoder");
    out.add("id_vectors", m.id_vectors);
    out.add("pos_embed", m.pos_embed);
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        collect_params(m.blocks[b], out, "block" + std::to_string(b));
    }
    collect_params(m.update, out, "update");
    collect_params(m.id_update, out, "id_update");
    collect_params(m.decoder, out, "decoder");
}

struct ModelVars {
    EncoderVars enc;
    Var ids;
    Var pos;
    std::vector<BlockVars> blocks;
    FusionVars update;
    Var iduw, idub;
    DecoderVars dec;
};

template <typename T>
ModelVars lift(Graph<T>& g, const Model<T>& m, bool requires_grad) {
    ModelVars v;
    v.enc = lift(g, m.encoder, requires_grad);
    v.ids = g.input(m.id_vectors, requires_grad);
    v.pos = g.input(m.pos_embed, requires_grad);
    for (const auto& b : m.blocks) v.blocks.push_back(lift(g, b, requires_grad));
    v.update = lift(g, m.update, requires_grad);
    v.iduw = g.input(m.id_update.weight, requires_grad);
    v.idub = g.input(m.id_update.bias, requires_grad);
    v.dec = lift(g, m.decoder, requires_grad);
    return v;
}

inline void collect_vars(const ModelVars& v, std::vector<Var>& out) {
    collect_vars(v.enc, out);
    out.push_back(v.ids);
    out.push_back(v.pos);
    for (const auto& b : v.blocks) collect_vars(b, out);
    collect_vars(v.update, out);
    out.push_back(v.iduw);
    out.push_back(v.idub);
    collect_vars(v.dec, out);
}

// Weights the memory merge runs with: block 0's long-term operator when
// shared, otherwise the dedicated set.
inline const FusionVars& merge_weights(const ModelVars& v, bool shared_update) {
    return shared_update ? v.blocks[0].lt : v.update;
}

inline std::pair<Var, Var> id_merge_proj(const ModelVars& v, bool shared_update) {
    if (shared_update) return {v.blocks[0].idlw, v.blocks[0].idlb};
    return {v.iduw, v.idub};
}

// ---- checkpoints ----

template <typename T>
void save_model(const std::string& path, Model<T>& m) {
    Params<T> ps;
    collect_params(m, ps);
    save_params(path, config_to_json(m.cfg), ps);
}

template <typename T>
Model<T> load_model(const std::string& path) {
    TensorStore<T> store = load_tensors<T>(path);
    Model<T> m = make_model<T>(config_from_json(store.meta));
    Params<T> ps;
    collect_params(m, ps);
    for (auto& [name, dst] : ps.items) {
        Tensor<T>& src = store.require(name);
        if (src.shape() != dst->shape()) {
            throw ConfigError("'" + path + "' tensor '" + name + "' has shape " + src.shape_str() +
                              " but the model expects " + dst->shape_str());
        }
        *dst = std::move(src);
    }
    return m;
}

// ---- frame-to-token mapping ----

// Entity owning each token cell: majority pixel count over the cell's
// stride x stride block. Objects beat background on a tie; among objects the
// lower index wins. Cells owned by the background map to -1.
inline std::vector<int> assign_id(const MaskSet& masks, int stride, int n_max) {
    masks.validate(n_max);
    int side = masks.grid / stride;
    std::vector<int> idx(static_cast<size_t>(side) * side, -1);
    int cell = stride * stride;
    for (int cy = 0; cy < side; ++cy) {
        for (int cx = 0; cx < side; ++cx) {
            int best = -1, best_count = 0, covered = 0;
            for (size_t o = 0; o < masks.objects.size(); ++o) {
                int count = 0;
                for (int dy = 0; dy < stride; ++dy) {
                    for (int dx = 0; dx < stride; ++dx) {
                        count += masks.objects[o].at(cy * stride + dy, cx * stride + dx);
                    }
                }
                covered += count;
                if (count > best_count) {
                    best_count = count;
                    best = static_cast<int>(o);
                }
            }
            int background = cell - covered;
            if (best >= 0 && best_count >= background) {
                idx[static_cast<size_t>(cy) * side + cx] = best;
            }
        }
    }
    return idx;
}

// Per-pixel training targets over n_max + 1 channels: channel 0 is
// background, channel o + 1 is object o. Objects not marked tracked count as
// background, matching what a tracker that never saw them should output.
template <typename T>
Tensor<T> make_targets(const MaskSet& masks, int n_max, const std::vector<bool>* tracked = nullptr) {
    if (static_cast<int>(masks.objects.size()) > n_max) {
        throw DimensionError("mask set has " + std::to_string(masks.objects.size()) +
                             " objects but the model caps at " + std::to_string(n_max));
    }
    int g = masks.grid;
    Tensor<T> t({g, g, n_max + 1});
    for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
            int owner = -1;
            for (size_t o = 0; o < masks.objects.size(); ++o) {
                if (tracked != nullptr && !(*tracked)[o]) continue;
                if (masks.objects[o].at(y, x)) {
                    owner = static_cast<int>(o);
                    break;
                }
            }
            t.at3(y, x, owner < 0 ? 0 : owner + 1) = T(1);
        }
    }
    return t;
}

// Equal-weight sum of a pixelwise binary cross entropy and a soft Jaccard
// term, both over all channels.
template <typename T>
Var segmentation_loss(Graph<T>& g, Var logits, const Tensor<T>& targets) {
    Var t = g.input(targets);
    return g.scale(g.add(g.bce_with_logits_mean(logits, t), g.soft_jaccard_mean(logits, t)),
                   static_cast<T>(0.5));
}

// Argmax decode of the logits into per-object masks. Channel 0 is
// background; ties resolve to the lower channel.
template <typename T>
std::vector<BinMask> predict_masks(const Tensor<T>& logits, int n_objects) {
    int g = logits.dim(0);
    int ch = logits.dim(2);
    std::vector<BinMask> out(static_cast<size_t>(n_objects), BinMask(g, g));
    for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
            int best = 0;
            for (int c = 1; c < ch; ++c) {
                if (logits.at3(y, x, c) > logits.at3(y, x, best)) best = c;
            }
            if (best > 0 && best - 1 < n_objects) out[best - 1].at(y, x) = 1;
        }
    }
    return out;
}

// ---- streaming ----

struct StreamOptions {
    MemoryPolicy policy = MemoryPolicy::mca;
    int delta = 10;
    int window = 4;
};

// Everything that persists between frames of one video: the two memory
// banks plus the previous frame's per-depth features. Values survive across
// graphs; the Var bindings are remade whenever a new graph shows up, so a
// training clip can keep one graph (and gradient flow) across its frames
// while inference uses a fresh graph per frame.
template <typename T>
struct StreamState {
    MemoryBank<T> bank;
    CompanionBank<T> id_bank;
    std::vector<Tensor<T>> prev_vis, prev_id;
    std::vector<TokenVar> prev_vis_v, prev_id_v;
    uint64_t bound_uid = 0;
    long cursor = -1;

    bool initialized() const { return bank.initialized(); }
};

template <typename T>
void init_stream(Graph<T>& g, const ModelVars& mv, const Model<T>& m, StreamState<T>& st,
                 const Tensor<T>& image, const MaskSet& masks, const StreamOptions& opt) {
    if (st.initialized()) throw UsageError("stream already initialized");
    if (masks.grid != m.cfg.grid) {
        throw DimensionError("reference masks are " + std::to_string(masks.grid) +
                             "px but the model runs at " + std::to_string(m.cfg.grid) + "px");
    }
    st.bank = MemoryBank<T>(opt.policy, opt.delta, opt.window);
    EncodeResult<T> er = encode(g, mv.enc, g.input(image), m.cfg);
    std::vector<int> idx = assign_id(masks, m.cfg.stride, m.cfg.n_max);
    int side = m.cfg.token_side();
    TokenVar ref_id{g.gather_rows(mv.ids, idx), side, side};
    TokenVar ref_vis{g.add(er.tokens.v, mv.pos), side, side};
    st.bank.init_reference(g, ref_vis);
    st.id_bank.init_reference(g, ref_id);
    st.cursor = 0;
    st.bound_uid = g.uid();
}

template <typename T>
struct FrameResult {
    Var logits;  // [G x G x (n_max + 1)]
    BankEvent event = BankEvent::none;
    TrunkResult<T> trunk;
};

template <typename T>
FrameResult<T> segment_frame(Graph<T>& g, const ModelVars& mv, const Model<T>& m,
                             StreamState<T>& st, long frame_index, const Tensor<T>& image) {
    if (!st.initialized()) {
        throw UsageError("segment_frame before the stream saw a reference frame");
    }
    if (frame_index <= st.cursor) {
        throw UsageError("stream frames must advance: got " + std::to_string(frame_index) +
                         " after " + std::to_string(st.cursor));
    }
    Var img = g.input(image);
    EncodeResult<T> er = encode(g, mv.enc, img, m.cfg);
    int side = m.cfg.token_side();
    TokenVar id_in{g.input(Tensor<T>({side * side, m.cfg.d})), side, side};

    TokenVar vis_ctx = st.bank.context(g);
    TokenVar id_ctx = st.id_bank.context(g);

    const std::vector<TokenVar>* pv = nullptr;
    const std::vector<TokenVar>* pi = nullptr;
    if (!st.prev_vis.empty()) {
        if (st.bound_uid != g.uid()) {
            st.prev_vis_v.clear();
            st.prev_id_v.clear();
            for (const auto& t : st.prev_vis) st.prev_vis_v.push_back({g.input(t), side, side});
            for (const auto& t : st.prev_id) st.prev_id_v.push_back({g.input(t), side, side});
        }
        pv = &st.prev_vis_v;
        pi = &st.prev_id_v;
    }

    TokenVar vis_in{g.add(er.tokens.v, mv.pos), side, side};
    FrameResult<T> r;
    r.trunk = trunk_forward(g, mv.blocks, vis_in, id_in, pv, pi, vis_ctx, id_ctx);
    r.logits = decode(g, mv.dec, r.trunk.vis_out, r.trunk.id_out, er.stages, img, m.cfg);

    r.event = st.bank.observe(g, frame_index, r.trunk.vis_out,
                              &merge_weights(mv, m.cfg.shared_update));
    auto [pw, pb] = id_merge_proj(mv, m.cfg.shared_update);
    st.id_bank.apply(g, r.event, frame_index, r.trunk.id_out, st.bank.last_merge_attn(), pw, pb);

    st.prev_vis_v = r.trunk.block_vis_in;
    st.prev_id_v = r.trunk.block_id_out;
    st.prev_vis.clear();
    st.prev_id.clear();
    for (const auto& t : st.prev_vis_v) st.prev_vis.push_back(g.val(t.v));
    for (const auto& t : st.prev_id_v) st.prev_id.push_back(g.val(t.v));
    st.bound_uid = g.uid();
    st.cursor = frame_index;
    return r;
}

// ---- stream snapshots ----

template <typename T>
void save_stream(const std::string& path, const StreamState<T>& st) {
    if (!st.initialized()) throw UsageError("cannot snapshot an uninitialized stream");
    nlohmann::json meta;
    meta["cursor"] = st.cursor;
    meta["policy"] = policy_name(st.bank.policy());
    meta["delta"] = st.bank.delta();
    meta["window"] = st.bank.window_size();
    meta["grid_h"] = st.bank.grid_h();
    meta["grid_w"] = st.bank.grid_w();
    meta["last_frame"] = st.bank.last_frame();
    meta["depths"] = st.prev_vis.size();
    std::vector<std::pair<std::string, const Tensor<T>*>> items;
    auto slot_meta = [&](const std::vector<MemorySlot<T>>& slots, const std::string& tag) {
        nlohmann::json arr = nlohmann::json::array();
        for (size_t i = 0; i < slots.size(); ++i) {
            nlohmann::json e;
            e["frame"] = slots[i].frame_index;
            e["reference"] = slots[i].is_reference;
            e["merges"] = slots[i].merge_count;
            arr.push_back(std::move(e));
            items.emplace_back(tag + std::to_string(i), &slots[i].tokens);
        }
        return arr;
    };
    meta["vslots"] = slot_meta(st.bank.slots(), "vslot");
    meta["islots"] = slot_meta(st.id_bank.slots(), "islot");
    for (size_t i = 0; i < st.prev_vis.size(); ++i) {
        items.emplace_back("prev_vis" + std::to_string(i), &st.prev_vis[i]);
        items.emplace_back("prev_id" + std::to_string(i), &st.prev_id[i]);
    }
    save_tensors(path, meta, items);
}

template <typename T>
StreamState<T> load_stream(const std::string& path) {
    TensorStore<T> store = load_tensors<T>(path);
    const nlohmann::json& meta = store.meta;
    StreamState<T> st;
    try {
        auto load_slots = [&](const nlohmann::json& arr, const std::string& tag) {
            std::vector<MemorySlot<T>> slots;
            size_t i = 0;
            for (const auto& e : arr) {
                MemorySlot<T> s;
                s.tokens = store.require(tag + std::to_string(i));
                s.frame_index = e.at("frame").get<long>();
                s.is_reference = e.at("reference").get<bool>();
                s.merge_count = e.at("merges").get<int>();
                slots.push_back(std::move(s));
                ++i;
            }
            return slots;
        };
        int h = meta.at("grid_h").get<int>();
        int w = meta.at("grid_w").get<int>();
        st.bank = MemoryBank<T>(parse_policy(meta.at("policy").get<std::string>()),
                                meta.at("delta").get<int>(), meta.value("window", 4));
        st.bank.restore(st.bank.policy(), st.bank.delta(), st.bank.window_size(), h, w,
                        meta.at("last_frame").get<long>(), load_slots(meta.at("vslots"), "vslot"));
        st.id_bank.restore(h, w, load_slots(meta.at("islots"), "islot"));
        st.cursor = meta.at("cursor").get<long>();
        size_t depths = meta.at("depths").get<size_t>();
        for (size_t i = 0; i < depths; ++i) {
            st.prev_vis.push_back(store.require("prev_vis" + std::to_string(i)));
            st.prev_id.push_back(store.require("prev_id" + std::to_string(i)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' stream snapshot manifest is malformed (" + e.what() +
                          ")");
    }
    return st;
}

// ---- evaluation ----

struct VideoScore {
    std::string name;
    JfSummary jf;
    long frames = 0;
    int scored_objects = 0;
    MemoryStats final_mem;
};

// Stream a whole video and score frames 1..N-1 against ground truth. The
// reference frame is given, so it is not scored; objects whose reference
// mask is empty cannot be tracked and are left out of the score.
//
// `frame` is called as frame(t, pixels, masks) for t = 0, 1, ..., in order.
// `on_pred`, when set, receives every scored frame's predicted masks (all
// n_objects of them, untracked included) before scoring.
template <typename T, typename FrameFn>
VideoScore evaluate_video(const Model<T>& m, const std::string& name, long frames, int n_objects,
                          FrameFn&& frame, const StreamOptions& opt,
                          const std::function<void(long, const std::vector<BinMask>&)>& on_pred =
                              {}) {
    if (frames < 2) throw UsageError("evaluating '" + name + "' needs at least 2 frames");
    StreamState<T> st;
    FramePixels px;
    MaskSet ms;
    frame(0, px, ms);
    std::vector<bool> tracked(static_cast<size_t>(n_objects));
    for (int o = 0; o < n_objects; ++o) tracked[o] = !ms.objects[o].empty_mask();
    if (std::count(tracked.begin(), tracked.end(), true) == 0) {
        throw ValidationError("'" + name +
                              "': every object's reference mask is empty, nothing to track");
    }
    {
        Graph<T> g;
        ModelVars mv = lift(g, m, false);
        init_stream(g, mv, m, st, frame_to_tensor<T>(px), ms, opt);
    }
    std::vector<std::vector<BinMask>> preds, gts;
    for (long t = 1; t < frames; ++t) {
        frame(t, px, ms);
        Graph<T> g;
        ModelVars mv = lift(g, m, false);
        FrameResult<T> fr = segment_frame(g, mv, m, st, t, frame_to_tensor<T>(px));
        std::vector<BinMask> all = predict_masks(g.val(fr.logits), n_objects);
        if (on_pred) on_pred(t, all);
        std::vector<BinMask> p, q;
        for (int o = 0; o < n_objects; ++o) {
            if (!tracked[o]) continue;
            p.push_back(std::move(all[o]));
            q.push_back(ms.objects[o]);
        }
        preds.push_back(std::move(p));
        gts.push_back(std::move(q));
    }
    VideoScore s;
    s.name = name;
    s.frames = frames;
    s.scored_objects = static_cast<int>(std::count(tracked.begin(), tracked.end(), true));
    s.jf = jf_score(preds, gts);
    s.final_mem = st.bank.stats();
    return s;
}

}  // namespace mavos
