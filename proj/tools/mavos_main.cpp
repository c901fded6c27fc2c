// mavos: synthetic-video segmentation engine driver.
//
// Subcommands: gen, train, eval, bench, gradcheck. Every flag can also be
// supplied through --config <file>, a flat JSON object keyed by the long
// flag names (without the dashes); explicit flags win over the file.
// Exit codes: 0 success, 1 bad input or failed check, 2 file trouble.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mavos/bench.hpp"
#include "mavos/dataset_io.hpp"
#include "mavos/gradcheck.hpp"
#include "mavos/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mavos;

namespace {

json load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("config '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
    return j;
}

// Apply config-file values as new defaults before CLI11 parses the real
// flags; anything typed on the command line then overrides them.
template <typename T>
void cfg_default(const json& j, const char* key, T& slot) {
    if (!j.contains(key)) return;
    try {
        slot = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

struct ModelFlags {
    int grid = 64;
    int stride = 8;
    int dim = 32;
    int levels = 2;
    int blocks = 3;
    int objects = 4;
    int ff_mult = 2;
    uint64_t model_seed = 1;

    void defaults_from(const json& j) {
        cfg_default(j, "grid", grid);
        cfg_default(j, "stride", stride);
        cfg_default(j, "dim", dim);
        cfg_default(j, "levels", levels);
        cfg_default(j, "blocks", blocks);
        cfg_default(j, "objects", objects);
        cfg_default(j, "ff-mult", ff_mult);
        cfg_default(j, "model-seed", model_seed);
    }

    void add_flags(CLI::App* c) {
        c->add_option("--grid", grid, "frame side in pixels");
        c->add_option("--stride", stride, "pixels per token cell");
        c->add_option("--dim", dim, "feature width D");
        c->add_option("--levels", levels, "focal pyramid levels");
        c->add_option("--blocks", blocks, "propagation blocks");
        c->add_option("--objects", objects, "max objects per video");
        c->add_option("--ff-mult", ff_mult, "feed-forward widening factor");
        c->add_option("--model-seed", model_seed, "weight init seed");
    }

    ModelConfig to_config() const {
        ModelConfig mc;
        mc.grid = grid;
        mc.stride = stride;
        mc.d = dim;
        mc.levels = levels;
        mc.blocks = blocks;
        mc.n_max = objects;
        mc.ff_mult = ff_mult;
        mc.seed = model_seed;
        mc.validate();
        return mc;
    }
};

std::string checkpoint_precision(const std::string& path) {
    storefile::RawStore raw = storefile::read_file(path);
    if (!raw.manifest.contains("precision")) {
        throw FormatError("'" + path + "' manifest has no precision tag");
    }
    return raw.manifest.at("precision").get<std::string>();
}

std::vector<std::string> dataset_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".mavs") {
            files.push_back(e.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("'" + dir + "' holds no .mavs files");
    return files;
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << body;
    if (!out) throw IoError("short write to '" + path + "'");
}

json score_json(const VideoScore& s) {
    return json{{"name", s.name},
                {"frames", s.frames},
                {"scored_objects", s.scored_objects},
                {"j", s.jf.j},
                {"f", s.jf.f},
                {"jf", s.jf.jf},
                {"final_tokens", s.final_mem.token_count},
                {"final_logical_bytes", s.final_mem.logical_bytes}};
}

json scores_json(const std::vector<VideoScore>& scores) {
    json videos = json::array();
    double j = 0, f = 0;
    for (const auto& s : scores) {
        videos.push_back(score_json(s));
        j += s.jf.j;
        f += s.jf.f;
    }
    double n = static_cast<double>(scores.size());
    return json{{"videos", videos},
                {"mean", {{"j", j / n}, {"f", f / n}, {"jf", mean_jf(scores)}}}};
}

// One grayscale label image per frame: 0 background, o + 1 for object o.
std::function<void(long, const std::vector<BinMask>&)> pgm_dumper(const std::string& dir,
                                                                  const std::string& video) {
    fs::create_directories(dir);
    return [dir, video](long t, const std::vector<BinMask>& preds) {
        if (preds.empty()) return;
        int g = preds[0].h;
        std::vector<uint8_t> label(static_cast<size_t>(g) * g, 0);
        for (size_t o = 0; o < preds.size(); ++o) {
            for (int y = 0; y < g; ++y) {
                for (int x = 0; x < g; ++x) {
                    if (preds[o].at(y, x) && label[static_cast<size_t>(y) * g + x] == 0) {
                        label[static_cast<size_t>(y) * g + x] = static_cast<uint8_t>(o + 1);
                    }
                }
            }
        }
        char name[64];
        std::snprintf(name, sizeof(name), "%s_f%06ld.pgm", video.c_str(), t);
        write_pgm(dir + "/" + name, label, g, g,
                  std::max(1, static_cast<int>(preds.size())));
    };
}

int cmd_gen(const std::string& suite, uint64_t seed, const std::string& out_dir,
            std::ostream& log) {
    std::vector<VideoSpec> specs = suite_by_name(suite, seed);
    fs::create_directories(out_dir);
    for (const auto& spec : specs) {
        std::string path = out_dir + "/" + spec.name + ".mavs";
        export_video(path, spec);
        log << path << " (" << spec.cfg.frames << " frames, " << spec.cfg.n_objects
            << " objects)\n";
    }
    log << specs.size() << " videos written to " << out_dir << "\n";
    return 0;
}

template <typename T>
int cmd_train(const ModelFlags& mf, const TrainConfig& tc, const std::string& out_path,
              const std::string& dataset, std::ostream& log) {
    if (!dataset.empty()) {
        // Training clips are always rendered procedurally; a dataset here
        // only anchors the geometry and must agree with the model config.
        DatasetReader rd(dataset_files(dataset)[0]);
        if (rd.header().grid != mf.grid) {
            throw ConfigError("dataset '" + dataset + "' is " +
                              std::to_string(rd.header().grid) + "px but the model config says " +
                              std::to_string(mf.grid) + "px");
        }
    }
    Model<T> m = make_model<T>(mf.to_config());
    TrainReport rep = train(m, tc, &log);
    save_model(out_path, m);
    log << "checkpoint " << out_path << " (final loss "
        << detail::fmt_g17(rep.losses.empty() ? 0.0 : rep.losses.back()) << ")\n";
    return 0;
}

template <typename T>
int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& suite,
             uint64_t suite_seed, const StreamOptions& opt, const std::string& out_path,
             const std::string& dump_dir, std::ostream& log) {
    Model<T> m = load_model<T>(checkpoint);
    std::vector<VideoScore> scores;
    if (!dataset.empty()) {
        for (const std::string& path : dataset_files(dataset)) {
            std::string stem = fs::path(path).stem().string();
            auto hook = dump_dir.empty() ? std::function<void(long, const std::vector<BinMask>&)>{}
                                         : pgm_dumper(dump_dir, stem);
            VideoScore s = evaluate_file(m, path, opt, hook);
            log << s.name << " J&F " << detail::fmt_g17(s.jf.jf) << "\n";
            scores.push_back(std::move(s));
        }
    } else {
        for (const VideoSpec& spec : suite_by_name(suite, suite_seed)) {
            if (spec.cfg.grid != m.cfg.grid) {
                throw ConfigError("video '" + spec.name + "' is " +
                                  std::to_string(spec.cfg.grid) + "px but the model runs at " +
                                  std::to_string(m.cfg.grid) + "px");
            }
            auto hook = dump_dir.empty() ? std::function<void(long, const std::vector<BinMask>&)>{}
                                         : pgm_dumper(dump_dir, spec.name);
            VideoScore s = evaluate_video(
                m, spec.name, spec.cfg.frames, spec.cfg.n_objects,
                [&](long t, FramePixels& px, MaskSet& ms) {
                    px = render_pixels(spec.cfg, t);
                    ms = render_masks(spec.cfg, t);
                },
                opt, hook);
            log << s.name << " J&F " << detail::fmt_g17(s.jf.jf) << "\n";
            scores.push_back(std::move(s));
        }
    }
    json out = scores_json(scores);
    out["policy"] = policy_name(opt.policy);
    out["delta"] = opt.delta;
    out["window"] = opt.window;
    std::string body = out.dump(2);
    body.push_back('\n');
    if (out_path.empty()) {
        std::cout << body;
    } else {
        write_text(out_path, body);
        log << "metrics " << out_path << "\n";
    }
    return 0;
}

// Focal-level sweep: fresh models that differ only in the pyramid depth,
// scored on the same suite. Reports per-level J&F; the point is the switch
// works end to end, not which depth wins at this scale.
template <typename T>
int cmd_eval_ablation(const ModelFlags& mf, const std::string& suite, uint64_t suite_seed,
                      const StreamOptions& opt, const std::string& out_path, std::ostream& log) {
    json runs = json::array();
    for (int levels : {1, 2, 3}) {
        ModelFlags f = mf;
        f.levels = levels;
        Model<T> m = make_model<T>(f.to_config());
        std::vector<VideoScore> scores = evaluate_suite(m, suite_by_name(suite, suite_seed), opt);
        json r = scores_json(scores);
        r["levels"] = levels;
        log << "levels " << levels << " mean J&F " << detail::fmt_g17(mean_jf(scores)) << "\n";
        runs.push_back(std::move(r));
    }
    json out{{"ablation", runs}, {"policy", policy_name(opt.policy)}, {"delta", opt.delta}};
    std::string body = out.dump(2);
    body.push_back('\n');
    if (out_path.empty()) {
        std::cout << body;
    } else {
        write_text(out_path, body);
        log << "metrics " << out_path << "\n";
    }
    return 0;
}

int cmd_gradcheck(uint64_t seed, int depth, bool corrupt, std::ostream& log) {
    gradcheck::Report rep =
        gradcheck::run_suite<double>(seed, depth, 1e-4, corrupt ? 0.05 : 0.0);
    for (const auto& c : rep.components) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-28s max rel err %.3e over %lld coords  %s",
                      c.name.c_str(), c.max_rel, static_cast<long long>(c.coords),
                      c.pass ? "ok" : "FAIL");
        log << line << "\n";
    }
    log << (rep.all_pass() ? "all gradients match" : "gradient mismatch") << "\n";
    return rep.all_pass() ? 0 : 1;
}

int run(int argc, char** argv) {
    // Pre-scan for --config so its values become defaults everywhere.
    json cfg = json::object();
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") cfg = load_config(argv[i + 1]);
    }

    CLI::App app{"synthetic-video segmentation engine"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "flat JSON with flag defaults")->expected(1);

    // gen
    auto* gen = app.add_subcommand("gen", "materialize a video suite to .mavs files");
    std::string gen_suite = "standard", gen_out = "dataset";
    uint64_t gen_seed = 99;
    cfg_default(cfg, "suite", gen_suite);
    cfg_default(cfg, "seed", gen_seed);
    cfg_default(cfg, "out", gen_out);
    gen->add_option("--suite", gen_suite, "standard|heldout|short|occlusion|disappearance|long|verylong");
    gen->add_option("--seed", gen_seed, "suite seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--config", config_path)->group("");

    // train
    auto* tr = app.add_subcommand("train", "train on procedural clips, write a checkpoint");
    ModelFlags tr_mf;
    tr_mf.defaults_from(cfg);
    TrainConfig tc;
    std::string tr_out = "model.mavw", tr_dataset, tr_precision = "f64";
    cfg_default(cfg, "steps", tc.steps);
    cfg_default(cfg, "unroll", tc.unroll);
    cfg_default(cfg, "burnin", tc.max_burnin);
    cfg_default(cfg, "delta", tc.delta);
    cfg_default(cfg, "lr", tc.lr);
    cfg_default(cfg, "clip-norm", tc.clip_norm);
    cfg_default(cfg, "window", tc.window);
    cfg_default(cfg, "seed", tc.seed);
    cfg_default(cfg, "loss-csv", tc.loss_csv);
    cfg_default(cfg, "out", tr_out);
    cfg_default(cfg, "dataset", tr_dataset);
    cfg_default(cfg, "precision", tr_precision);
    std::string tr_policy = policy_name(tc.policy);
    cfg_default(cfg, "policy", tr_policy);
    tr_mf.add_flags(tr);
    tr->add_option("--steps", tc.steps, "optimization steps");
    tr->add_option("--unroll", tc.unroll, "supervised frames per clip");
    tr->add_option("--burnin", tc.max_burnin, "max unsupervised lead-in frames");
    tr->add_option("--delta", tc.delta, "memory update period");
    tr->add_option("--lr", tc.lr, "learning rate");
    tr->add_option("--clip-norm", tc.clip_norm, "global gradient norm cap");
    tr->add_option("--policy", tr_policy, "full|window|refprev|mca");
    tr->add_option("--window", tc.window, "window policy size");
    tr->add_option("--seed", tc.seed, "clip sampling seed");
    tr->add_option("--loss-csv", tc.loss_csv, "per-step loss log path");
    tr->add_option("--log-every", tc.log_every, "console logging period");
    tr->add_option("--out", tr_out, "checkpoint output path");
    tr->add_option("--dataset", tr_dataset, "existing dataset dir to validate against");
    tr->add_option("--precision", tr_precision, "f32|f64");
    tr->add_option("--config", config_path)->group("");

    // eval
    auto* ev = app.add_subcommand("eval", "score a checkpoint on stored or rendered videos");
    ModelFlags ev_mf;
    ev_mf.defaults_from(cfg);
    std::string ev_ck, ev_dataset, ev_suite = "heldout", ev_out, ev_dump, ev_precision = "f64";
    uint64_t ev_seed = 99;
    StreamOptions ev_opt;
    bool ev_ablation = false;
    cfg_default(cfg, "checkpoint", ev_ck);
    cfg_default(cfg, "dataset", ev_dataset);
    cfg_default(cfg, "suite", ev_suite);
    cfg_default(cfg, "seed", ev_seed);
    cfg_default(cfg, "out", ev_out);
    cfg_default(cfg, "dump-masks", ev_dump);
    cfg_default(cfg, "delta", ev_opt.delta);
    cfg_default(cfg, "window", ev_opt.window);
    cfg_default(cfg, "precision", ev_precision);
    std::string ev_policy = policy_name(ev_opt.policy);
    cfg_default(cfg, "policy", ev_policy);
    ev_mf.add_flags(ev);
    ev->add_option("--checkpoint", ev_ck, "trained model to load");
    ev->add_option("--dataset", ev_dataset, "directory of .mavs files");
    ev->add_option("--suite", ev_suite, "rendered suite name (when no dataset)");
    ev->add_option("--seed", ev_seed, "rendered suite seed");
    ev->add_option("--policy", ev_policy, "full|window|refprev|mca");
    ev->add_option("--delta", ev_opt.delta, "memory update period");
    ev->add_option("--window", ev_opt.window, "window policy size");
    ev->add_option("--out", ev_out, "metrics JSON path (stdout when empty)");
    ev->add_option("--dump-masks", ev_dump, "write per-frame PGM label images here");
    ev->add_flag("--levels-ablation", ev_ablation,
                 "sweep focal levels 1..3 with fresh models instead of loading a checkpoint");
    ev->add_option("--precision", ev_precision, "f32|f64 (ablation models)");
    ev->add_option("--config", config_path)->group("");

    // bench
    auto* be = app.add_subcommand("bench", "latency/memory sweep over policies and lengths");
    BenchConfig bc;
    std::vector<std::string> be_policies = bc.policies;
    std::vector<long> be_lengths = bc.lengths;
    cfg_default(cfg, "delta", bc.delta);
    cfg_default(cfg, "grid", bc.grid);
    cfg_default(cfg, "dim", bc.d);
    cfg_default(cfg, "levels", bc.levels);
    cfg_default(cfg, "precision", bc.precision);
    cfg_default(cfg, "warmup", bc.warmup);
    cfg_default(cfg, "repetitions", bc.repetitions);
    cfg_default(cfg, "seed", bc.seed);
    cfg_default(cfg, "out", bc.out_path);
    cfg_default(cfg, "parallel", bc.parallel);
    cfg_default(cfg, "policies", be_policies);
    cfg_default(cfg, "lengths", be_lengths);
    be->add_option("--policies", be_policies, "policy specs (full, window:N, refprev, mca)")
        ->delimiter(',');
    be->add_option("--lengths", be_lengths, "video lengths in frames")->delimiter(',');
    be->add_option("--delta", bc.delta, "memory update period");
    be->add_option("--grid", bc.grid, "frame side in pixels");
    be->add_option("--dim", bc.d, "feature width D");
    be->add_option("--levels", bc.levels, "focal pyramid levels");
    be->add_option("--precision", bc.precision, "f32|f64");
    be->add_option("--warmup", bc.warmup, "leading frames excluded from the report");
    be->add_option("--repetitions", bc.repetitions, "timing repetitions per cell");
    be->add_option("--seed", bc.seed, "weights and video seed");
    be->add_option("--out", bc.out_path, "CSV output path");
    be->add_flag("--parallel", bc.parallel,
                 "spread cells over MAVOS_THREADS workers (never splits one stream)");
    be->add_option("--config", config_path)->group("");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    uint64_t gc_seed = 7;
    int gc_depth = 3;
    bool gc_corrupt = false;
    cfg_default(cfg, "seed", gc_seed);
    cfg_default(cfg, "depth", gc_depth);
    gc->add_option("--seed", gc_seed, "fixture seed");
    gc->add_option("--depth", gc_depth, "block stack depth");
    gc->add_flag("--corrupt-gradient", gc_corrupt)->group("");
    gc->add_option("--config", config_path)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    if (gen->parsed()) return cmd_gen(gen_suite, gen_seed, gen_out, std::cerr);

    if (tr->parsed()) {
        tc.policy = parse_policy(tr_policy);
        if (tr_precision == "f32") return cmd_train<float>(tr_mf, tc, tr_out, tr_dataset, std::cerr);
        if (tr_precision == "f64") return cmd_train<double>(tr_mf, tc, tr_out, tr_dataset, std::cerr);
        throw ConfigError("precision must be f32 or f64, got '" + tr_precision + "'");
    }

    if (ev->parsed()) {
        ev_opt.policy = parse_policy(ev_policy);
        if (ev_ablation) {
            if (ev_precision == "f32") {
                return cmd_eval_ablation<float>(ev_mf, ev_suite, ev_seed, ev_opt, ev_out,
                                                std::cerr);
            }
            if (ev_precision == "f64") {
                return cmd_eval_ablation<double>(ev_mf, ev_suite, ev_seed, ev_opt, ev_out,
                                                 std::cerr);
            }
            throw ConfigError("precision must be f32 or f64, got '" + ev_precision + "'");
        }
        if (ev_ck.empty()) throw UsageError("eval needs --checkpoint (or --levels-ablation)");
        std::string prec = checkpoint_precision(ev_ck);
        if (prec == "f32") {
            return cmd_eval<float>(ev_ck, ev_dataset, ev_suite, ev_seed, ev_opt, ev_out, ev_dump,
                                   std::cerr);
        }
        return cmd_eval<double>(ev_ck, ev_dataset, ev_suite, ev_seed, ev_opt, ev_out, ev_dump,
                                std::cerr);
    }

    if (be->parsed()) {
        bc.policies = be_policies;
        bc.lengths = be_lengths;
        std::vector<BenchRow> rows = run_bench(bc, &std::cerr);
        write_bench_csv(bc.out_path, rows);
        std::cerr << rows.size() << " rows -> " << bc.out_path << "\n";
        return 0;
    }

    return cmd_gradcheck(gc_seed, gc_depth, gc_corrupt, std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
