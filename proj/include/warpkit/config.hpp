#pragma once

#include <filesystem>

#include "warpkit/diffusion.hpp"
#include "warpkit/injection.hpp"

namespace warpkit {

// Everything a run needs, flattened into one kv file (schema wk-1).
// Unknown keys are rejected; missing keys keep their defaults; a save/load
// round trip reproduces the struct exactly.
struct RunConfig {
    DType precision = DType::F32;
    std::uint64_t seed = 7;
    ModelConfig model;
    std::size_t schedule_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    TrainConfig train;
    InjectionConfig inject;

    Schedule make_schedule() const {
        return Schedule::linear(schedule_steps, beta_start, beta_end);
    }

    void save(const std::filesystem::path& path) const;
    static RunConfig load(const std::filesystem::path& path);

    // canonical serialized form; hash() fingerprints it for reports
    std::string to_text() const;
    std::string hash() const;
};

// honors the WARPKIT_PRECISION environment variable ("f32"/"f64") on top of
// whatever the config file says
void apply_precision(const RunConfig& cfg);

}  // namespace warpkit
