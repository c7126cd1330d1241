#pragma once

#include <filesystem>

#include "warpkit/config.hpp"
#include "warpkit/scenes.hpp"

namespace warpkit {

// fixed prompt layout: subject slot first, then deterministic filler ids
std::vector<std::size_t> make_prompt(const ModelConfig& cfg);

void save_prompt(const std::filesystem::path& path,
                 const std::vector<std::size_t>& ids);
std::vector<std::size_t> load_prompt(const std::filesystem::path& path,
                                     const ModelConfig& cfg);

// [1,H,W,c] reference image tiled along the frame axis
Tensor tile_frames(const Tensor& ref, std::size_t frames);

// first three channels of each frame, min-max scaled, as binary PPMs
void save_frames_ppm(const std::filesystem::path& dir, const Tensor& video);

// Commands behind the CLI. Each writes its artifacts plus a report.json and
// returns the report. All are deterministic given the config (reports carry
// wall-clock timings, which the byte-stable artifact files never include).
struct GenScenesOut {
    std::filesystem::path manifest;
    std::size_t count = 0;
};
GenScenesOut cmd_gen_scenes(const RunConfig& cfg, std::size_t count,
                            const std::filesystem::path& out_dir);

struct AdaptOut {
    double initial_loss = 0.0;
    double final_loss = 0.0;
};
AdaptOut cmd_adapt(const RunConfig& cfg, const std::filesystem::path& refs,
                   const std::filesystem::path& prompt_path,
                   const std::filesystem::path& out_dir);

struct GenerateOut {
    std::size_t injected_steps = 0;
    std::size_t fallback_steps = 0;
    double mean_fidelity = 0.0;
};
GenerateOut cmd_generate(const RunConfig& cfg, const std::filesystem::path& ckpt,
                         const std::filesystem::path& ref_path,
                         const std::filesystem::path& prompt_path,
                         const std::filesystem::path& scene_dir,  // may be empty
                         const std::filesystem::path& out_dir);

struct MatchEvalOut {
    std::size_t best_layer = 0;
    std::string best_kind;
    double best_pck = 0.0;
};
MatchEvalOut cmd_match_eval(const RunConfig& cfg,
                            const std::filesystem::path& scene_dir, double alpha,
                            const std::filesystem::path& out_dir);

struct AblateOut {
    std::filesystem::path table;
    std::size_t rows = 0;
};
AblateOut cmd_ablate(const RunConfig& cfg, const std::vector<double>& drifts,
                     const std::filesystem::path& out_dir);

}  // namespace warpkit
