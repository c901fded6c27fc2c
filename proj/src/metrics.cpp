#include "mavos/metrics.hpp"

namespace mavos {

namespace {

void require_same_dims(const BinMask& a, const BinMask& b) {
    if (a.h != b.h || a.w != b.w) {
        throw DimensionError("mask size mismatch: " + std::to_string(a.h) + "x" +
                             std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                             std::to_string(b.w));
    }
}

}  // namespace

double j_index(const BinMask& pred, const BinMask& gt) {
    require_same_dims(pred, gt);
    size_t inter = 0, uni = 0;
    for (size_t p = 0; p < pred.px.size(); ++p) {
        bool a = pred.px[p] != 0;
        bool b = gt.px[p] != 0;
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

BinMask boundary_of(const BinMask& m) {
    BinMask b(m.h, m.w);
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
            bool exposed = edge || !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) ||
                           !m.at(y, x + 1);
            b.at(y, x) = exposed ? 1 : 0;
        }
    }
    return b;
}

namespace {

// Fraction of `from` boundary pixels with a `to` boundary pixel within
// Euclidean distance 1 (the pixel itself or a 4-neighbor).
double matched_fraction(const BinMask& from, const BinMask& to) {
    size_t total = 0, matched = 0;
    for (int y = 0; y < from.h; ++y) {
        for (int x = 0; x < from.w; ++x) {
            if (!from.at(y, x)) continue;
            ++total;
            bool hit = to.at(y, x) != 0;
            if (!hit && y > 0) hit = to.at(y - 1, x) != 0;
            if (!hit && y < to.h - 1) hit = to.at(y + 1, x) != 0;
            if (!hit && x > 0) hit = to.at(y, x - 1) != 0;
            if (!hit && x < to.w - 1) hit = to.at(y, x + 1) != 0;
            matched += hit;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(matched) / static_cast<double>(total);
}

}  // namespace

double f_boundary(const BinMask& pred, const BinMask& gt) {
    require_same_dims(pred, gt);
    bool pe = pred.empty_mask();
    bool ge = gt.empty_mask();
    if (pe && ge) return 1.0;
    if (pe != ge) return 0.0;
    BinMask pb = boundary_of(pred);
    BinMask gb = boundary_of(gt);
    double precision = matched_fraction(pb, gb);
    double recall = matched_fraction(gb, pb);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

JfSummary jf_score(const std::vector<std::vector<BinMask>>& preds,
                   const std::vector<std::vector<BinMask>>& gts) {
    if (preds.size() != gts.size()) {
        throw DimensionError("jf_score: " + std::to_string(preds.size()) +
                             " predicted frames vs " + std::to_string(gts.size()) +
                             " ground-truth frames");
    }
    if (preds.empty()) throw UsageError("jf_score: no frames");
    JfSummary s;
    for (size_t t = 0; t < preds.size(); ++t) {
        if (preds[t].size() != gts[t].size() || preds[t].empty()) {
            throw DimensionError("jf_score: object count mismatch at frame " + std::to_string(t));
        }
        double j = 0.0, f = 0.0;
        for (size_t o = 0; o < preds[t].size(); ++o) {
            j += j_index(preds[t][o], gts[t][o]);
            f += f_boundary(preds[t][o], gts[t][o]);
        }
        j /= static_cast<double>(preds[t].size());
        f /= static_cast<double>(preds[t].size());
        s.j += j;
        s.f += f;
        s.jf += 0.5 * (j + f);
    }
    double n = static_cast<double>(preds.size());
    s.j /= n;
    s.f /= n;
    s.jf /= n;
    return s;
}

}  // namespace mavos
