#include "mavos/synthgen.hpp"

#include <cmath>

namespace mavos {

SceneKind parse_scene_kind(const std::string& name) {
    if (name == "standard") return SceneKind::standard;
    if (name == "occlusion") return SceneKind::occlusion;
    if (name == "disappearance") return SceneKind::disappearance;
    throw ConfigError("unknown scene kind '" + name +
                      "' (expected standard, occlusion, or disappearance)");
}

const char* scene_kind_name(SceneKind k) {
    switch (k) {
        case SceneKind::standard: return "standard";
        case SceneKind::occlusion: return "occlusion";
        default: return "disappearance";
    }
}

namespace {

uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Uniform [0, 1) derived from a hash, so every scene property is a pure
// function of (seed, tag) with no draw-order coupling.
double unit(uint64_t seed, uint64_t tag) { return (mix(seed ^ mix(tag)) >> 11) * 0x1.0p-53; }

double range(uint64_t seed, uint64_t tag, double lo, double hi) {
    return lo + (hi - lo) * unit(seed, tag);
}

struct ObjectTraits {
    int shape = 0;  // 0 disc, 1 square, 2 diamond
    double radius = 0;
    double r = 0, g = 0, b = 0;  // fill color
    double ax = 0, ay = 0;       // orbit amplitudes
    double wx = 0, wy = 0;       // angular speeds
    double px = 0, py = 0;       // phases
    double cx0 = 0, cy0 = 0;     // orbit center
    long period = 0;             // visibility cycle (disappearance scenes)
    long on_frames = 0;          // visible prefix of each cycle
    long offset = 0;
};

ObjectTraits traits(const SynthConfig& cfg, int i) {
    uint64_t s = cfg.seed;
    uint64_t base = static_cast<uint64_t>(i) * 1000;
    ObjectTraits o;
    o.shape = static_cast<int>(mix(s ^ mix(base + 1)) % 3);
    double g = cfg.grid;
    o.radius = range(s, base + 2, g / 8.0, g / 5.0);
    // Bright, saturated fills well separated from the dim background.
    double hue = unit(s, base + 3) + i * 0.37;
    hue -= std::floor(hue);
    o.r = 0.55 + 0.4 * (0.5 + 0.5 * std::sin(6.283185307179586 * hue));
    o.g = 0.55 + 0.4 * (0.5 + 0.5 * std::sin(6.283185307179586 * (hue + 1.0 / 3.0)));
    o.b = 0.55 + 0.4 * (0.5 + 0.5 * std::sin(6.283185307179586 * (hue + 2.0 / 3.0)));
    bool crowd = cfg.kind == SceneKind::occlusion;
    double amin = crowd ? g / 7.0 : g / 6.0;
    double amax = crowd ? g / 5.0 : g / 3.2;
    o.ax = range(s, base + 4, amin, amax);
    o.ay = range(s, base + 5, amin, amax);
    o.wx = range(s, base + 6, 0.035, 0.09);
    o.wy = range(s, base + 7, 0.035, 0.09);
    o.px = range(s, base + 8, 0.0, 6.283185307179586);
    o.py = range(s, base + 9, 0.0, 6.283185307179586);
    double margin = o.radius + 1.0;
    double cmin_x = margin + o.ax, cmax_x = g - 1 - margin - o.ax;
    double cmin_y = margin + o.ay, cmax_y = g - 1 - margin - o.ay;
    if (crowd) {
        // Everyone orbits near the center so paths cross constantly.
        o.cx0 = g / 2.0 + range(s, base + 10, -g / 16.0, g / 16.0);
        o.cy0 = g / 2.0 + range(s, base + 11, -g / 16.0, g / 16.0);
    } else {
        o.cx0 = range(s, base + 10, cmin_x, std::max(cmin_x, cmax_x));
        o.cy0 = range(s, base + 11, cmin_y, std::max(cmin_y, cmax_y));
    }
    o.period = 80 + static_cast<long>(mix(s ^ mix(base + 12)) % 81);  // 80..160
    o.on_frames = static_cast<long>(o.period * range(s, base + 13, 0.55, 0.75));
    // Offset lands inside the visible prefix so every object is visible at
    // t = 0: the first frame defines the objects being tracked.
    o.offset = static_cast<long>(mix(s ^ mix(base + 14)) % static_cast<uint64_t>(o.on_frames));
    return o;
}

bool covers(const ObjectTraits& o, double cx, double cy, int x, int y) {
    double dx = x - cx;
    double dy = y - cy;
    switch (o.shape) {
        case 0: return dx * dx + dy * dy <= o.radius * o.radius;
        case 1: return std::abs(dx) <= o.radius && std::abs(dy) <= o.radius * 0.8;
        default: return std::abs(dx) + std::abs(dy) <= o.radius * 1.2;
    }
}

void center_at(const ObjectTraits& o, long t, double& cx, double& cy) {
    cx = o.cx0 + o.ax * std::sin(o.wx * t + o.px);
    cy = o.cy0 + o.ay * std::cos(o.wy * t + o.py);
}

bool visible_at(const SynthConfig& cfg, const ObjectTraits& o, long t) {
    if (cfg.kind != SceneKind::disappearance) return true;
    return (t + o.offset) % o.period < o.on_frames;
}

void check_config(const SynthConfig& cfg) {
    if (cfg.grid < 8) throw ConfigError("scene grid must be at least 8 pixels");
    if (cfg.n_objects < 1 || cfg.n_objects > 8) {
        throw ConfigError("scene object count must be between 1 and 8");
    }
    if (cfg.frames < 1) throw ConfigError("scene must have at least one frame");
}

}  // namespace

bool object_visible(const SynthConfig& cfg, int index, long t) {
    check_config(cfg);
    return visible_at(cfg, traits(cfg, index), t);
}

void object_center(const SynthConfig& cfg, int index, long t, double& cx, double& cy) {
    check_config(cfg);
    center_at(traits(cfg, index), t, cx, cy);
}

bool object_covers(const SynthConfig& cfg, int index, long t, int x, int y) {
    check_config(cfg);
    ObjectTraits o = traits(cfg, index);
    double cx, cy;
    center_at(o, t, cx, cy);
    return covers(o, cx, cy, x, y);
}

FramePixels render_pixels(const SynthConfig& cfg, long t) {
    check_config(cfg);
    int g = cfg.grid;
    size_t plane = static_cast<size_t>(g) * g;
    FramePixels out;
    out.grid = g;
    out.rgb.assign(3 * plane, 0);

    // Background: a gentle two-way gradient, per-seed base colors.
    double br = range(cfg.seed, 900001, 0.08, 0.22);
    double bg = range(cfg.seed, 900002, 0.08, 0.22);
    double bb = range(cfg.seed, 900003, 0.08, 0.22);
    double gx = range(cfg.seed, 900004, -0.12, 0.12);
    double gy = range(cfg.seed, 900005, -0.12, 0.12);

    std::vector<ObjectTraits> obj;
    std::vector<double> cx(cfg.n_objects), cy(cfg.n_objects);
    std::vector<bool> vis(cfg.n_objects);
    for (int i = 0; i < cfg.n_objects; ++i) {
        obj.push_back(traits(cfg, i));
        center_at(obj[i], t, cx[i], cy[i]);
        vis[i] = visible_at(cfg, obj[i], t);
    }

    for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
            double r = br + gx * (static_cast<double>(x) / g);
            double gr = bg + gy * (static_cast<double>(y) / g);
            double b = bb + 0.5 * (gx + gy) * (static_cast<double>(x + y) / (2.0 * g));
            // Topmost visible object wins the pixel (higher index on top).
            for (int i = cfg.n_objects - 1; i >= 0; --i) {
                if (vis[i] && covers(obj[i], cx[i], cy[i], x, y)) {
                    r = obj[i].r;
                    gr = obj[i].g;
                    b = obj[i].b;
                    break;
                }
            }
            // Tiny deterministic pixel noise so frames are not flat patches.
            uint64_t h = mix(cfg.seed ^ mix(0xf00d + static_cast<uint64_t>(t) * 1048576 +
                                            static_cast<uint64_t>(y) * 1024 +
                                            static_cast<uint64_t>(x)));
            double noise = ((h >> 11) * 0x1.0p-53 - 0.5) * 0.03;
            auto put = [&](int c, double v) {
                v += noise;
                if (v < 0) v = 0;
                if (v > 1) v = 1;
                out.rgb[c * plane + static_cast<size_t>(y) * g + x] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            };
            put(0, r);
            put(1, gr);
            put(2, b);
        }
    }
    return out;
}

MaskSet render_masks(const SynthConfig& cfg, long t) {
    check_config(cfg);
    int g = cfg.grid;
    MaskSet ms(g, cfg.n_objects);
    std::vector<ObjectTraits> obj;
    std::vector<double> cx(cfg.n_objects), cy(cfg.n_objects);
    std::vector<bool> vis(cfg.n_objects);
    for (int i = 0; i < cfg.n_objects; ++i) {
        obj.push_back(traits(cfg, i));
        center_at(obj[i], t, cx[i], cy[i]);
        vis[i] = visible_at(cfg, obj[i], t);
    }
    for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
            for (int i = cfg.n_objects - 1; i >= 0; --i) {
                if (vis[i] && covers(obj[i], cx[i], cy[i], x, y)) {
                    ms.objects[i].at(y, x) = 1;
                    break;
                }
            }
        }
    }
    return ms;
}

std::vector<VideoSpec> standard_suite(uint64_t seed) {
    auto cfg = [&](const char* name, int idx, int n, long frames, SceneKind kind) {
        SynthConfig c;
        c.grid = 64;
        c.n_objects = n;
        c.frames = frames;
        c.seed = mix(seed ^ mix(static_cast<uint64_t>(idx) * 7919));
        c.kind = kind;
        return VideoSpec{name, c};
    };
    return {
        cfg("short_a", 1, 2, 64, SceneKind::standard),
        cfg("short_b", 2, 3, 64, SceneKind::standard),
        cfg("short_c", 3, 4, 64, SceneKind::standard),
        cfg("occl_a", 4, 3, 128, SceneKind::occlusion),
        cfg("occl_b", 5, 4, 128, SceneKind::occlusion),
        cfg("disap_a", 6, 3, 256, SceneKind::disappearance),
        cfg("disap_b", 7, 3, 256, SceneKind::disappearance),
        cfg("long_disap", 8, 3, 1024, SceneKind::disappearance),
        cfg("verylong", 9, 2, 4096, SceneKind::standard),
    };
}

std::vector<VideoSpec> suite_by_name(const std::string& suite, uint64_t seed) {
    std::vector<VideoSpec> all = standard_suite(seed);
    if (suite == "standard") return all;
    auto starts = [](const std::string& s, const char* p) { return s.rfind(p, 0) == 0; };
    std::vector<VideoSpec> out;
    for (auto& v : all) {
        bool take = (suite == "heldout" && v.name != "verylong") ||
                    (suite == "short" && starts(v.name, "short_")) ||
                    (suite == "occlusion" && starts(v.name, "occl_")) ||
                    (suite == "disappearance" && starts(v.name, "disap_")) ||
                    (suite == "long" && v.name == "long_disap") ||
                    (suite == "verylong" && v.name == "verylong");
        if (take) out.push_back(std::move(v));
    }
    if (out.empty()) {
        throw ConfigError("unknown suite '" + suite +
                          "', expected standard, heldout, short, occlusion, disappearance, "
                          "long, or verylong");
    }
    return out;
}

}  // namespace mavos
