#pragma once

#include <vector>

#include "mavos/masks.hpp"

namespace mavos {

// Region similarity: intersection over union. Both masks empty counts as a
// perfect 1.
double j_index(const BinMask& pred, const BinMask& gt);

// Boundary quality. A pixel is boundary if it is set and touches the image
// edge or an unset 4-neighbor. Boundary pixels match within Euclidean
// distance 1; F = 2PR / (P + R). Both masks empty scores 1, exactly one
// empty scores 0.
double f_boundary(const BinMask& pred, const BinMask& gt);

// Set and unset boundary helpers, exposed for tests.
BinMask boundary_of(const BinMask& m);

struct JfSummary {
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;  // mean of (J + F) / 2
};

// Video score: per frame, average J and F over objects; then average over
// frames. preds and gts are indexed [frame][object] and must agree in shape.
JfSummary jf_score(const std::vector<std::vector<BinMask>>& preds,
                   const std::vector<std::vector<BinMask>>& gts);

}  // namespace mavos
