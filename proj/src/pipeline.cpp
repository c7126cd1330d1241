#include "warpkit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "warpkit/adaptation.hpp"
#include "warpkit/correspondence.hpp"
#include "warpkit/error.hpp"
#include "warpkit/kvfile.hpp"
#include "warpkit/tensor_io.hpp"

namespace warpkit {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double ms() const {
        return std::chrono::duration<double, std::milli>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_report(const fs::path& dir, json j) { write_text(dir / "report.json", j.dump(2) + "\n"); }

double json_safe(double v) { return std::isfinite(v) ? v : 0.0; }

json diag_json(const StepDiag& d) {
    json j{{"step", d.step},
           {"t", d.t},
           {"banded", d.banded},
           {"injected", d.injected},
           {"fallback", d.fallback},
           {"fg_count", d.fg_count},
           {"cc_count", d.cc_count},
           {"mask_count", d.mask_count},
           {"leak_count", d.leak_count}};
    j["fidelity"] = std::isfinite(d.fidelity) ? json(d.fidelity) : json(nullptr);
    j["pck_vs_gt"] = std::isfinite(d.pck_vs_gt) ? json(d.pck_vs_gt) : json(nullptr);
    return j;
}

std::string zpad(std::size_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

SceneParams scene_params_for(const RunConfig& cfg, std::size_t index) {
    static const std::pair<int, int> kSteps[] = {{1, 0}, {0, 1}, {1, 1},
                                                 {2, 1}, {1, 2}, {0, 2}};
    SceneParams p;
    p.grid = GridDims{cfg.model.frames, cfg.model.grid_h, cfg.model.grid_w};
    p.channels = cfg.model.channels;
    p.subject_channels.clear();
    const std::size_t stride = std::max<std::size_t>(1, p.channels / 4);
    for (std::size_t ch = 0; ch < p.channels && p.subject_channels.size() < 4;
         ch += stride)
        p.subject_channels.push_back(ch);
    p.whole_frame = index % 2 == 0;
    p.step_h = kSteps[index % 6].first;
    p.step_w = kSteps[index % 6].second;
    p.origin_h = 1 + static_cast<int>(index % 3);
    p.origin_w = 2;
    p.seed = cfg.seed * 1000 + index;
    return p;
}

void dump_run(const fs::path& out, const RunConfig& cfg,
              const DualBranchResult& run, const GridDims& grid) {
    save_tensor(out / "video.wkt", run.video.to(cfg.precision));
    save_frames_ppm(out / "frames", run.video);

    fs::create_directories(out / "masks");
    fs::create_directories(out / "flows");
    for (const StepArtifacts& art : run.artifacts) {
        const std::string tag = "step_" + zpad(art.step, 2);
        for (std::size_t f = 0; f < grid.frames; ++f) {
            const std::string ftag = tag + "_f" + zpad(f, 2);
            save_mask_pgm(out / "masks" / (ftag + "_fg.pgm"), art.fg, grid, f);
            save_mask_pgm(out / "masks" / (ftag + "_cc.pgm"), art.cc, grid, f);
            save_mask_pgm(out / "masks" / (ftag + "_mt.pgm"), art.mt, grid, f);
        }
        save_flow_csv(out / "flows" / (tag + ".csv"), art.flow);
    }

    std::string lines;
    for (const StepDiag& d : run.steps) lines += diag_json(d).dump() + "\n";
    write_text(out / "steps.jsonl", lines);
}

}  // namespace

std::vector<std::size_t> make_prompt(const ModelConfig& cfg) {
    if (cfg.vocab < 3) throw ConfigError("make_prompt: vocabulary too small");
    std::vector<std::size_t> ids(cfg.text_len);
    ids[0] = cfg.subject_id();
    for (std::size_t i = 1; i < cfg.text_len; ++i)
        ids[i] = 1 + (i * 7 + 3) % (cfg.vocab - 2);
    return ids;
}

void save_prompt(const fs::path& path, const std::vector<std::size_t>& ids) {
    KvFile kv("wk-prompt-1");
    kv.set_int("count", static_cast<long long>(ids.size()));
    std::string joined;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) joined += ",";
        joined += std::to_string(ids[i]);
    }
    kv.set("ids", joined);
    kv.save(path);
}

std::vector<std::size_t> load_prompt(const fs::path& path, const ModelConfig& cfg) {
    KvFile kv = KvFile::load(path, "wk-prompt-1");
    const std::size_t count = static_cast<std::size_t>(kv.get_int("count"));
    std::vector<std::size_t> ids;
    std::stringstream ss(kv.get("ids"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty() || item[0] == '-')
            throw ConfigError("prompt: bad id '" + item + "'");
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            throw ConfigError("prompt: bad id '" + item + "'");
        }
        if (pos != item.size()) throw ConfigError("prompt: bad id '" + item + "'");
        ids.push_back(static_cast<std::size_t>(v));
    }
    if (ids.size() != count) throw ConfigError("prompt: count does not match ids");
    if (ids.size() != cfg.text_len)
        throw ConfigError("prompt: expected " + std::to_string(cfg.text_len) +
                          " ids, got " + std::to_string(ids.size()));
    for (std::size_t id : ids)
        if (id >= cfg.vocab) throw ConfigError("prompt: id out of vocabulary");
    return ids;
}

Tensor tile_frames(const Tensor& ref, std::size_t frames) {
    if (ref.rank() != 4 || ref.dim(0) != 1)
        throw ShapeError("tile_frames: want [1,H,W,c], got " + ref.shape_str());
    Tensor out({frames, ref.dim(1), ref.dim(2), ref.dim(3)}, ref.dtype());
    const std::size_t per = ref.numel();
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < per; ++i) out[f * per + i] = ref[i];
    out.seal();
    return out;
}

void save_frames_ppm(const fs::path& dir, const Tensor& video) {
    if (video.rank() != 4 || video.dim(3) < 3)
        throw ShapeError("save_frames_ppm: want [F,H,W,c>=3]");
    fs::create_directories(dir);
    const std::size_t F = video.dim(0), H = video.dim(1), W = video.dim(2),
                      C = video.dim(3);
    for (std::size_t f = 0; f < F; ++f) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = video[((f * H + h) * W + w) * C + c];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
        const double span = hi > lo ? hi - lo : 1.0;
        std::string body;
        body.reserve(H * W * 3);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = video[((f * H + h) * W + w) * C + c];
                    int px = static_cast<int>(std::lround((v - lo) / span * 255.0));
                    body.push_back(static_cast<char>(std::clamp(px, 0, 255)));
                }
        std::string head = "P6\n" + std::to_string(W) + " " + std::to_string(H) +
                           "\n255\n";
        write_text(dir / ("frame_" + zpad(f, 3) + ".ppm"), head + body);
    }
}

GenScenesOut cmd_gen_scenes(const RunConfig& cfg, std::size_t count,
                            const fs::path& out_dir) {
    if (count == 0) throw ConfigError("gen-scenes: count must be > 0");
    Stopwatch clock;
    apply_precision(cfg);
    fs::create_directories(out_dir / "scenes");
    cfg.save(out_dir / "config.kv");
    save_prompt(out_dir / "prompt.kv", make_prompt(cfg.model));

    KvFile manifest("wk-corpus-1");
    manifest.set_int("count", static_cast<long long>(count));
    json scene_names = json::array();
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = "scene_" + zpad(i, 3);
        Scene scene = make_scene(scene_params_for(cfg, i));
        const fs::path dir = out_dir / "scenes" / name;
        save_scene(dir, scene);
        manifest.set(name + ".video_hash", content_hash(read_bytes(dir / "video.wkt")));
        manifest.set(name + ".reference_hash",
                     content_hash(read_bytes(dir / "reference.wkt")));
        if (i == 0) {
            fs::create_directories(out_dir / "refs");
            auto refs = make_reference_set(scene, 4);
            for (std::size_t r = 0; r < refs.size(); ++r)
                save_tensor(out_dir / "refs" / ("ref_" + zpad(r, 2) + ".wkt"),
                            refs[r].to(cfg.precision));
        }
        scene_names.push_back(name);
    }
    manifest.save(out_dir / "manifest.kv");

    write_report(out_dir, json{{"command", "gen-scenes"},
                               {"config_hash", cfg.hash()},
                               {"count", count},
                               {"scenes", scene_names},
                               {"elapsed_ms", clock.ms()}});
    return GenScenesOut{out_dir / "manifest.kv", count};
}

AdaptOut cmd_adapt(const RunConfig& cfg, const fs::path& refs,
                   const fs::path& prompt_path, const fs::path& out_dir) {
    Stopwatch clock;
    apply_precision(cfg);
    std::vector<Tensor> ref_set;
    if (fs::exists(refs / "scene.kv")) {
        ref_set = make_reference_set(load_scene(refs), 4);
    } else {
        std::vector<fs::path> files;
        if (!fs::is_directory(refs)) throw IoError("adapt: no such directory " + refs.string());
        for (const auto& e : fs::directory_iterator(refs))
            if (e.path().extension() == ".wkt") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) ref_set.push_back(load_tensor(f));
    }
    if (ref_set.empty()) throw ConfigError("adapt: no reference images found");

    Model model = Model::random_init(cfg.model, cfg.seed);
    Schedule sched = cfg.make_schedule();
    std::vector<std::size_t> prompt = load_prompt(prompt_path, cfg.model);
    TrainConfig tc = cfg.train;
    if (tc.seed == 0) tc.seed = cfg.seed;
    TrainResult result = train_coarse(model, sched, ref_set, prompt, tc);

    fs::create_directories(out_dir);
    save_checkpoint(out_dir, result.adapters, result.token, cfg.model,
                    result.loss_curve);
    cfg.save(out_dir / "config.kv");

    AdaptOut out;
    out.initial_loss = result.loss_curve.front();
    out.final_loss = result.loss_curve.back();
    write_report(out_dir, json{{"command", "adapt"},
                               {"config_hash", cfg.hash()},
                               {"references", ref_set.size()},
                               {"steps", tc.steps},
                               {"initial_loss", out.initial_loss},
                               {"final_loss", out.final_loss},
                               {"elapsed_ms", clock.ms()}});
    return out;
}

GenerateOut cmd_generate(const RunConfig& cfg, const fs::path& ckpt,
                         const fs::path& ref_path, const fs::path& prompt_path,
                         const fs::path& scene_dir, const fs::path& out_dir) {
    Stopwatch clock;
    apply_precision(cfg);
    Model model = Model::random_init(cfg.model, cfg.seed);
    Schedule sched = cfg.make_schedule();
    Checkpoint cp = load_checkpoint(ckpt, cfg.model);
    std::vector<std::size_t> prompt = load_prompt(prompt_path, cfg.model);

    Tensor ref = load_tensor(ref_path);
    Tensor ref_latent = tile_frames(ref, cfg.model.frames);

    Scene scene;
    const Scene* oracle = nullptr;
    if (!scene_dir.empty()) {
        scene = load_scene(scene_dir);
        oracle = &scene;
    }

    DualBranchResult run =
        run_dual_branch(model, sched, &cp.adapters, &cp.token, prompt, ref_latent,
                        cfg.inject, cfg.seed, oracle);

    fs::create_directories(out_dir);
    const GridDims grid{cfg.model.frames, cfg.model.grid_h, cfg.model.grid_w};
    dump_run(out_dir, cfg, run, grid);

    GenerateOut out;
    out.injected_steps = run.injected_steps;
    out.fallback_steps = run.fallback_steps;
    out.mean_fidelity = json_safe(run.mean_fidelity);
    write_report(out_dir, json{{"command", "generate"},
                               {"config_hash", cfg.hash()},
                               {"strategy", strategy_name(cfg.inject.strategy)},
                               {"injected_steps", run.injected_steps},
                               {"fallback_steps", run.fallback_steps},
                               {"mean_fidelity", out.mean_fidelity},
                               {"elapsed_ms", clock.ms()}});
    return out;
}

MatchEvalOut cmd_match_eval(const RunConfig& cfg, const fs::path& scene_dir,
                            double alpha, const fs::path& out_dir) {
    Stopwatch clock;
    apply_precision(cfg);
    Scene scene = load_scene(scene_dir);
    Model model = Model::content_identity(cfg.model);
    Schedule sched = cfg.make_schedule();
    std::vector<std::size_t> prompt = make_prompt(cfg.model);

    const auto [s_lo, s_hi] = band_range(cfg.inject.step_band, sched.steps);
    if (s_lo > s_hi) throw ConfigError("match-eval: empty step band");
    std::vector<std::size_t> ts;
    for (std::size_t s : {s_lo, (s_lo + s_hi) / 2, s_hi}) {
        std::size_t t = sched.steps - s + 1;
        if (std::find(ts.begin(), ts.end(), t) == ts.end()) ts.push_back(t);
    }

    SweepResult sweep = descriptor_sweep(model, sched, scene, prompt, ts, alpha,
                                         cfg.seed);
    fs::create_directories(out_dir);
    save_sweep_csv(out_dir / "sweep.csv", sweep);

    MatchEvalOut out;
    out.best_layer = sweep.best_layer;
    out.best_kind = descriptor_kind_name(sweep.best_kind);
    out.best_pck = sweep.best_pck;
    write_report(out_dir, json{{"command", "match-eval"},
                               {"config_hash", cfg.hash()},
                               {"alpha", alpha},
                               {"timesteps", ts},
                               {"best_layer", out.best_layer},
                               {"best_kind", out.best_kind},
                               {"best_pck", out.best_pck},
                               {"elapsed_ms", clock.ms()}});
    return out;
}

AblateOut cmd_ablate(const RunConfig& cfg, const std::vector<double>& drifts,
                     const fs::path& out_dir) {
    Stopwatch clock;
    apply_precision(cfg);
    Model model = Model::content_identity(cfg.model);
    Schedule sched = cfg.make_schedule();
    std::vector<std::size_t> prompt = make_prompt(cfg.model);
    SubjectToken token = SubjectToken::init(cfg.model, model.weights());

    static const Strategy kStrategies[] = {Strategy::None, Strategy::ValueWarp,
                                           Strategy::KvReplace,
                                           Strategy::TokenConcat};
    fs::create_directories(out_dir);
    std::string csv =
        "scene,drift,strategy,injected_steps,fallback_steps,mean_fidelity,"
        "leak_total,mean_pck\n";
    json rows = json::array();
    std::size_t n_rows = 0;
    for (std::size_t i = 0; i < drifts.size(); ++i) {
        SceneParams p = scene_params_for(cfg, 2 * i);  // whole-frame variants
        p.whole_frame = true;
        p.subject_drift = drifts[i];
        Scene scene = make_scene(p);
        Tensor ref_latent = repeat_reference(scene, cfg.model.frames);
        const std::string scene_name = "drift_" + zpad(i, 2);

        for (Strategy st : kStrategies) {
            InjectionConfig inj = cfg.inject;
            inj.strategy = st;
            DualBranchResult run = run_dual_branch(
                model, sched, nullptr, &token, prompt, ref_latent, inj, cfg.seed,
                &scene, &scene.video);
            std::size_t leak = 0;
            double pck_sum = 0.0;
            std::size_t pck_n = 0;
            for (const StepDiag& d : run.steps) {
                leak += d.leak_count;
                if (std::isfinite(d.pck_vs_gt)) {
                    pck_sum += d.pck_vs_gt;
                    ++pck_n;
                }
            }
            const double mean_pck = pck_n ? pck_sum / static_cast<double>(pck_n) : 0.0;
            char line[256];
            std::snprintf(line, sizeof line, "%s,%.17g,%s,%zu,%zu,%.17g,%zu,%.17g\n",
                          scene_name.c_str(), drifts[i], strategy_name(st),
                          run.injected_steps, run.fallback_steps,
                          json_safe(run.mean_fidelity), leak, mean_pck);
            csv += line;
            rows.push_back(json{{"scene", scene_name},
                                {"drift", drifts[i]},
                                {"strategy", strategy_name(st)},
                                {"injected_steps", run.injected_steps},
                                {"fallback_steps", run.fallback_steps},
                                {"mean_fidelity", json_safe(run.mean_fidelity)},
                                {"leak_total", leak},
                                {"mean_pck", mean_pck}});
            ++n_rows;
        }
    }
    write_text(out_dir / "ablate.csv", csv);
    write_report(out_dir, json{{"command", "ablate"},
                               {"config_hash", cfg.hash()},
                               {"rows", rows},
                               {"elapsed_ms", clock.ms()}});
    return AblateOut{out_dir / "ablate.csv", n_rows};
}

}  // namespace warpkit
