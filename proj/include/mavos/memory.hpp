#pragma once

#include <string>
#include <vector>

#include "mavos/fusion.hpp"

namespace mavos {

// What to keep as a video streams past.
//
//   full_bank: append a slot every delta frames, keep everything.
//   window:    append every delta frames, keep the reference plus the most
//              recent `window_size` dynamic slots.
//   ref_prev:  keep the reference plus the latest frame only.
//   mca:       keep the reference plus one dynamic slot that absorbs each
//              new update through modulated cross attention.
enum class MemoryPolicy { full_bank, window, ref_prev, mca };

inline MemoryPolicy parse_policy(const std::string& name) {
    if (name == "full") return MemoryPolicy::full_bank;
    if (name == "window") return MemoryPolicy::window;
    if (name == "refprev") return MemoryPolicy::ref_prev;
    if (name == "mca") return MemoryPolicy::mca;
    throw ConfigError("unknown memory policy '" + name +
                      "' (expected full, window, refprev, or mca)");
}

inline const char* policy_name(MemoryPolicy p) {
    switch (p) {
        case MemoryPolicy::full_bank: return "full";
        case MemoryPolicy::window: return "window";
        case MemoryPolicy::ref_prev: return "refprev";
        default: return "mca";
    }
}

// What a single observe() call did to the bank.
enum class BankEvent { none, append, evict_append, replace_prev, merge };

template <typename T>
struct MemorySlot {
    Tensor<T> tokens;  // [T x D]
    long frame_index = -1;
    bool is_reference = false;
    int merge_count = 0;  // updates folded into this slot via attention
};

struct MemoryStats {
    size_t slot_count = 0;
    size_t token_count = 0;
    size_t logical_bytes = 0;
};

// Long-term feature memory for one stream. Slot 0 is always the reference
// frame; the rest are dynamic. Slot values persist across graphs: when the
// bank is asked for context (or must merge) on a graph it has not seen, it
// re-registers the stored tensors there first.
template <typename T>
class MemoryBank {
  public:
    MemoryBank() = default;

    MemoryBank(MemoryPolicy policy, int delta, int window_size = 4)
        : policy_(policy), delta_(delta), window_size_(window_size) {
        if (delta <= 0) throw ConfigError("memory update period must be positive");
        if (policy == MemoryPolicy::window && window_size <= 0) {
            throw ConfigError("window policy needs a positive window size");
        }
    }

    // Weights for the mca policy's merge, used when the caller does not hand
    // in graph-resident ones.
    void attach_update_weights(const FusionWeights<T>* w) { update_weights_ = w; }

    MemoryPolicy policy() const { return policy_; }
    int delta() const { return delta_; }
    int window_size() const { return window_size_; }
    bool initialized() const { return !slots_.empty(); }
    long last_frame() const { return last_frame_; }
    int grid_h() const { return h_; }
    int grid_w() const { return w_; }

    void init_reference(Graph<T>& g, const TokenVar& tokens) {
        if (initialized()) throw UsageError("memory bank already initialized");
        const Tensor<T>& tv = g.val(tokens.v);
        if (tv.rank() != 2 || tv.dim(0) != tokens.h * tokens.w) {
            throw DimensionError("reference features " + tv.shape_str() + " must be one " +
                                 std::to_string(tokens.h) + "x" + std::to_string(tokens.w) +
                                 " grid of tokens");
        }
        h_ = tokens.h;
        w_ = tokens.w;
        d_ = tv.dim(1);
        slots_.push_back(MemorySlot<T>{tv, 0, true, 0});
        vars_.push_back(tokens.v);
        bound_uid_ = g.uid();
        last_frame_ = 0;
    }

    void init_reference(const TokenMap<T>& tokens) {
        Graph<T> g;
        init_reference(g, lift(g, tokens));
        bound_uid_ = 0;
    }

    // Feed the features of one frame. Frame indices must increase strictly;
    // the policy decides whether anything is stored. For the mca policy the
    // merge runs on g, so pass `w` when gradients must flow through it.
    BankEvent observe(Graph<T>& g, long frame_index, const TokenVar& tokens,
                      const FusionVars* w = nullptr) {
        if (!initialized()) {
            throw UsageError("memory bank observe before init_reference");
        }
        if (frame_index <= last_frame_) {
            throw UsageError("memory bank frame indices must increase: got " +
                             std::to_string(frame_index) + " after " +
                             std::to_string(last_frame_));
        }
        check_tokens(g, tokens, "observe");
        last_frame_ = frame_index;
        last_attn_ = Var{};

        switch (policy_) {
            case MemoryPolicy::full_bank:
                if (frame_index % delta_ == 0) {
                    append(g, frame_index, tokens);
                    return record(BankEvent::append);
                }
                break;
            case MemoryPolicy::window:
                if (frame_index % delta_ == 0) {
                    append(g, frame_index, tokens);
                    if (static_cast<int>(slots_.size()) - 1 > window_size_) {
                        slots_.erase(slots_.begin() + 1);
                        vars_.erase(vars_.begin() + 1);
                        return record(BankEvent::evict_append);
                    }
                    return record(BankEvent::append);
                }
                break;
            case MemoryPolicy::ref_prev:
                if (slots_.size() == 1) {
                    append(g, frame_index, tokens);
                    return record(BankEvent::append);
                }
                slots_[1] = MemorySlot<T>{g.val(tokens.v), frame_index, false, 0};
                vars_[1] = tokens.v;
                return record(BankEvent::replace_prev);
            case MemoryPolicy::mca:
                if (frame_index % delta_ == 0) {
                    if (slots_.size() == 1) {
                        // First update: store the features as-is.
                        append(g, frame_index, tokens);
                        return record(BankEvent::append);
                    }
                    merge(g, frame_index, tokens, w);
                    return record(BankEvent::merge);
                }
                break;
        }
        return record(BankEvent::none);
    }

    BankEvent observe(long frame_index, const TokenMap<T>& tokens) {
        Graph<T> g;
        BankEvent e = observe(g, frame_index, lift(g, tokens));
        bound_uid_ = 0;
        return e;
    }

    // All slot tokens stacked along the token axis, reference first.
    TokenVar context(Graph<T>& g) {
        if (!initialized()) {
            throw UsageError("memory bank context requested before init_reference");
        }
        ensure_bound(g);
        if (vars_.size() == 1) return TokenVar{vars_[0], h_, w_};
        return TokenVar{g.concat_rows(vars_), h_, w_};
    }

    TokenMap<T> context_tokens() const {
        if (!initialized()) {
            throw UsageError("memory bank context requested before init_reference");
        }
        int per = h_ * w_;
        Tensor<T> out({static_cast<int>(slots_.size()) * per, d_});
        size_t off = 0;
        for (const auto& s : slots_) {
            std::copy(s.tokens.ptr(), s.tokens.ptr() + s.tokens.numel(), out.ptr() + off);
            off += s.tokens.numel();
        }
        return TokenMap<T>(std::move(out), h_, w_);
    }

    const std::vector<MemorySlot<T>>& slots() const { return slots_; }

    MemoryStats stats() const {
        MemoryStats s;
        s.slot_count = slots_.size();
        for (const auto& sl : slots_) s.token_count += static_cast<size_t>(sl.tokens.dim(0));
        s.logical_bytes = s.token_count * static_cast<size_t>(d_) * sizeof(T);
        return s;
    }

    BankEvent last_event() const { return last_event_; }

    // Attention map of the most recent merge. Valid only on the graph that
    // observe() ran on, and only when that observe merged.
    Var last_merge_attn() const { return last_attn_; }

    // Restore from a snapshot (deserialization path).
    void restore(MemoryPolicy policy, int delta, int window_size, int h, int w,
                 long last_frame, std::vector<MemorySlot<T>> slots) {
        if (slots.empty() || !slots[0].is_reference) {
            throw FormatError("memory snapshot must start with a reference slot");
        }
        policy_ = policy;
        delta_ = delta;
        window_size_ = window_size;
        h_ = h;
        w_ = w;
        d_ = slots[0].tokens.dim(1);
        last_frame_ = last_frame;
        slots_ = std::move(slots);
        vars_.assign(slots_.size(), Var{});
        bound_uid_ = 0;
    }

  private:
    void check_tokens(Graph<T>& g, const TokenVar& tokens, const char* what) const {
        const Tensor<T>& tv = g.val(tokens.v);
        if (tv.rank() != 2 || tv.dim(0) != h_ * w_ || tv.dim(1) != d_ || tokens.h != h_ ||
            tokens.w != w_) {
            throw DimensionError(std::string(what) + ": features " + tv.shape_str() +
                                 " do not match the bank's " + std::to_string(h_) + "x" +
                                 std::to_string(w_) + " grid of depth " + std::to_string(d_));
        }
    }

    void ensure_bound(Graph<T>& g) {
        if (bound_uid_ == g.uid()) return;
        for (size_t i = 0; i < slots_.size(); ++i) vars_[i] = g.input(slots_[i].tokens);
        bound_uid_ = g.uid();
    }

    void append(Graph<T>& g, long frame_index, const TokenVar& tokens) {
        ensure_bound(g);
        slots_.push_back(MemorySlot<T>{g.val(tokens.v), frame_index, false, 0});
        vars_.push_back(tokens.v);
    }

    // Fold the new features into the dynamic slot: the new frame queries the
    // old slot, and the attention-weighted modulated summary replaces it.
    // Both sides are standardized first so the stored slot's scale is set by
    // the update weights, not by how many merges it has absorbed; without
    // this the slot recurrence can gain magnitude on every merge.
    void merge(Graph<T>& g, long frame_index, const TokenVar& tokens, const FusionVars* w) {
        ensure_bound(g);
        FusionVars local;
        if (w == nullptr) {
            if (update_weights_ == nullptr) {
                throw UsageError("mca policy merge needs update weights (attach or pass them)");
            }
            local = lift(g, *update_weights_, false);
            w = &local;
        }
        TokenVar fresh{g.layer_norm_rows(tokens.v), tokens.h, tokens.w};
        TokenVar old{g.layer_norm_rows(vars_[1]), h_, w_};
        AttentionResult<T> r = modulated_cross_attention(g, fresh, old, *w);
        int merges = slots_[1].merge_count + 1;
        slots_[1] = MemorySlot<T>{g.val(r.out), frame_index, false, merges};
        vars_[1] = r.out;
        last_attn_ = r.attn;
    }

    BankEvent record(BankEvent e) {
        last_event_ = e;
        return e;
    }

    MemoryPolicy policy_ = MemoryPolicy::mca;
    int delta_ = 10;
    int window_size_ = 4;
    int h_ = 0, w_ = 0, d_ = 0;
    long last_frame_ = -1;
    std::vector<MemorySlot<T>> slots_;
    std::vector<Var> vars_;
    uint64_t bound_uid_ = 0;
    BankEvent last_event_ = BankEvent::none;
    Var last_attn_;
    const FusionWeights<T>* update_weights_ = nullptr;
};

// Identity-feature shadow of a MemoryBank. It never decides anything on its
// own: the owner replays each structural event of the visual bank onto it,
// keeping the two slot-for-slot aligned. A merge reuses the visual merge's
// attention map against a value projection of the old identity slot, so no
// extra attention is computed for identity features.
template <typename T>
class CompanionBank {
  public:
    bool initialized() const { return !slots_.empty(); }

    void init_reference(Graph<T>& g, const TokenVar& tokens) {
        if (initialized()) throw UsageError("companion bank already initialized");
        const Tensor<T>& tv = g.val(tokens.v);
        h_ = tokens.h;
        w_ = tokens.w;
        d_ = tv.dim(1);
        slots_.push_back(MemorySlot<T>{tv, 0, true, 0});
        vars_.push_back(tokens.v);
        bound_uid_ = g.uid();
    }

    void apply(Graph<T>& g, BankEvent e, long frame_index, const TokenVar& tokens,
               Var visual_attn, Var proj_w, Var proj_b) {
        if (!initialized()) throw UsageError("companion bank apply before init_reference");
        ensure_bound(g);
        switch (e) {
            case BankEvent::none:
                break;
            case BankEvent::append:
                slots_.push_back(MemorySlot<T>{g.val(tokens.v), frame_index, false, 0});
                vars_.push_back(tokens.v);
                break;
            case BankEvent::evict_append:
                slots_.push_back(MemorySlot<T>{g.val(tokens.v), frame_index, false, 0});
                vars_.push_back(tokens.v);
                slots_.erase(slots_.begin() + 1);
                vars_.erase(vars_.begin() + 1);
                break;
            case BankEvent::replace_prev:
                slots_[1] = MemorySlot<T>{g.val(tokens.v), frame_index, false, 0};
                vars_[1] = tokens.v;
                break;
            case BankEvent::merge: {
                if (!visual_attn.valid()) {
                    throw UsageError(
                        "companion bank merge requires the visual attention map from the same "
                        "graph");
                }
                Var folded =
                    g.matmul(visual_attn, g.linear(g.layer_norm_rows(vars_[1]), proj_w, proj_b));
                int merges = slots_[1].merge_count + 1;
                slots_[1] = MemorySlot<T>{g.val(folded), frame_index, false, merges};
                vars_[1] = folded;
                break;
            }
        }
    }

    TokenVar context(Graph<T>& g) {
        if (!initialized()) {
            throw UsageError("companion bank context requested before init_reference");
        }
        ensure_bound(g);
        if (vars_.size() == 1) return TokenVar{vars_[0], h_, w_};
        return TokenVar{g.concat_rows(vars_), h_, w_};
    }

    const std::vector<MemorySlot<T>>& slots() const { return slots_; }

    void restore(int h, int w, std::vector<MemorySlot<T>> slots) {
        h_ = h;
        w_ = w;
        d_ = slots.empty() ? 0 : slots[0].tokens.dim(1);
        slots_ = std::move(slots);
        vars_.assign(slots_.size(), Var{});
        bound_uid_ = 0;
    }

  private:
    void ensure_bound(Graph<T>& g) {
        if (bound_uid_ == g.uid()) return;
        for (size_t i = 0; i < slots_.size(); ++i) vars_[i] = g.input(slots_[i].tokens);
        bound_uid_ = g.uid();
    }

    int h_ = 0, w_ = 0, d_ = 0;
    std::vector<MemorySlot<T>> slots_;
    std::vector<Var> vars_;
    uint64_t bound_uid_ = 0;
};

}  // namespace mavos
