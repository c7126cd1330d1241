#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "warpkit/error.hpp"
#include "warpkit/pipeline.hpp"

namespace {

warpkit::RunConfig load_config(const std::string& path) {
    if (path.empty()) return warpkit::RunConfig{};
    return warpkit::RunConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"warpkit: coarse-to-fine subject-driven video generation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, refs_dir, prompt_path, ckpt_dir, ref_path,
        scene_dir, strategy;
    std::size_t count = 4;
    long long steps_override = -1, seed_override = -1;
    double alpha = 0.1;
    std::vector<double> drifts = {0.0, 0.35, 0.7};

    CLI::App* gen_scenes = app.add_subcommand("gen-scenes", "write a synthetic scene corpus");
    gen_scenes->add_option("--config", config_path, "run config (kv)");
    gen_scenes->add_option("--count", count, "number of scenes");
    gen_scenes->add_option("--out", out_dir, "output directory")->required();

    CLI::App* adapt = app.add_subcommand("adapt", "coarse adapter + subject-token pass");
    adapt->add_option("--config", config_path, "run config (kv)");
    adapt->add_option("--refs", refs_dir, "reference images (.wkt dir or scene dir)")->required();
    adapt->add_option("--prompt", prompt_path, "prompt file (kv)")->required();
    adapt->add_option("--steps", steps_override, "training steps override");
    adapt->add_option("--seed", seed_override, "seed override");
    adapt->add_option("--out", out_dir, "checkpoint directory")->required();

    CLI::App* generate = app.add_subcommand("generate", "dual-branch sampling with appearance injection");
    generate->add_option("--config", config_path, "run config (kv)");
    generate->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    generate->add_option("--ref", ref_path, "reference image (.wkt)")->required();
    generate->add_option("--prompt", prompt_path, "prompt file (kv)")->required();
    generate->add_option("--strategy", strategy, "none|value_warp|kv_replace|token_concat");
    generate->add_option("--scene", scene_dir, "scene directory for ground-truth diagnostics");
    generate->add_option("--seed", seed_override, "seed override");
    generate->add_option("--out", out_dir, "output directory")->required();

    CLI::App* match_eval = app.add_subcommand("match-eval", "descriptor sweep against analytic flow");
    match_eval->add_option("--config", config_path, "run config (kv)");
    match_eval->add_option("--scene", scene_dir, "scene directory")->required();
    match_eval->add_option("--alpha", alpha, "PCK radius fraction");
    match_eval->add_option("--out", out_dir, "output directory")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "strategy grid over drifted scenes");
    ablate->add_option("--config", config_path, "run config (kv)");
    ablate->add_option("--drifts", drifts, "subject drift levels");
    ablate->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        warpkit::RunConfig cfg = load_config(config_path);
        if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
        if (steps_override >= 0) cfg.train.steps = static_cast<std::size_t>(steps_override);
        if (!strategy.empty()) cfg.inject.strategy = warpkit::strategy_from_name(strategy);

        if (gen_scenes->parsed()) {
            auto out = warpkit::cmd_gen_scenes(cfg, count, out_dir);
            std::printf("wrote %zu scenes, manifest %s\n", out.count,
                        out.manifest.string().c_str());
        } else if (adapt->parsed()) {
            auto out = warpkit::cmd_adapt(cfg, refs_dir, prompt_path, out_dir);
            std::printf("loss %.6f -> %.6f\n", out.initial_loss, out.final_loss);
        } else if (generate->parsed()) {
            auto out = warpkit::cmd_generate(cfg, ckpt_dir, ref_path, prompt_path,
                                             scene_dir, out_dir);
            std::printf("injected %zu steps (%zu fallbacks)\n", out.injected_steps,
                        out.fallback_steps);
        } else if (match_eval->parsed()) {
            auto out = warpkit::cmd_match_eval(cfg, scene_dir, alpha, out_dir);
            std::printf("best layer %zu kind %s pck %.4f\n", out.best_layer,
                        out.best_kind.c_str(), out.best_pck);
        } else if (ablate->parsed()) {
            auto out = warpkit::cmd_ablate(cfg, drifts, out_dir);
            std::printf("wrote %zu rows to %s\n", out.rows, out.table.string().c_str());
        }
        return 0;
    } catch (const warpkit::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const warpkit::ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const warpkit::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
