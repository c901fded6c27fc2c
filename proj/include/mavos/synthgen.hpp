#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mavos/masks.hpp"
#include "mavos/tensor.hpp"

namespace mavos {

// Flavor of a generated scene.
//
//   standard:      objects orbit on spread-out paths, occasional overlap.
//   occlusion:     paths crowd the center so objects cross and hide each
//                  other often, including frames where one is fully covered.
//   disappearance: objects blink out for long stretches on a fixed schedule
//                  and come back while their (hidden) trajectory continues.
enum class SceneKind { standard, occlusion, disappearance };

SceneKind parse_scene_kind(const std::string& name);
const char* scene_kind_name(SceneKind k);

struct SynthConfig {
    int grid = 64;
    int n_objects = 2;
    long frames = 64;
    uint64_t seed = 1;
    SceneKind kind = SceneKind::standard;
};

// Planar 8-bit RGB pixels: R plane, then G plane, then B plane, each
// grid*grid bytes row-major.
struct FramePixels {
    int grid = 0;
    std::vector<uint8_t> rgb;
};

// Render one frame. Both functions are pure in (config, t): every call
// with the same arguments produces identical bytes, with no hidden stream
// state, so any frame of any video can be produced in isolation.
FramePixels render_pixels(const SynthConfig& cfg, long t);
MaskSet render_masks(const SynthConfig& cfg, long t);

// True when object `index` is scheduled visible at frame t (always true for
// non-disappearance scenes).
bool object_visible(const SynthConfig& cfg, int index, long t);

// Center of object `index` at frame t, in pixel coordinates.
void object_center(const SynthConfig& cfg, int index, long t, double& cx, double& cy);

// Whether object `index` covers pixel (x, y) at frame t, ignoring occlusion
// by other objects and the visibility schedule.
bool object_covers(const SynthConfig& cfg, int index, long t, int x, int y);

struct VideoSpec {
    std::string name;
    SynthConfig cfg;
};

// The fixed evaluation/benchmark catalog for a given seed: three short
// videos, two occlusion-heavy, two disappearance-heavy, one long
// disappearance-heavy video, and one very long video.
std::vector<VideoSpec> standard_suite(uint64_t seed);

// Catalog subset by name: "standard" (everything), "heldout" (everything
// but the very long video), "short", "occlusion", "disappearance", "long",
// "verylong". Unknown names raise ConfigError.
std::vector<VideoSpec> suite_by_name(const std::string& suite, uint64_t seed);

// Pixels as a [G x G x 3] tensor in [0, 1].
template <typename T>
Tensor<T> frame_to_tensor(const FramePixels& px) {
    int g = px.grid;
    Tensor<T> t({g, g, 3});
    size_t plane = static_cast<size_t>(g) * g;
    for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
            size_t p = static_cast<size_t>(y) * g + x;
            for (int c = 0; c < 3; ++c) {
                t.at3(y, x, c) = static_cast<T>(px.rgb[c * plane + p] / 255.0);
            }
        }
    }
    return t;
}

}  // namespace mavos
