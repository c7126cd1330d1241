#pragma once

#include <filesystem>

#include "warpkit/rng.hpp"
#include "warpkit/tensor.hpp"

namespace warpkit {

struct GridDims {
    std::size_t frames = 4;
    std::size_t h = 8;
    std::size_t w = 8;

    std::size_t per_frame() const { return h * w; }
    std::size_t tokens() const { return frames * h * w; }
};

// Synthetic clip on a toroidal token grid. A square sprite of per-cell
// signatures rides over a smooth background; every cell also carries a common
// base direction, and sprite cells get a bump on the subject indicator
// channels. In whole_frame mode the entire frame translates (the
// frame-to-reference map is a bijection); otherwise only the sprite moves
// over a static background, so sprite pixels occlude it.
struct SceneParams {
    GridDims grid;
    std::size_t channels = 64;
    std::size_t sprite = 3;  // sprite side length, in cells
    int origin_h = 2, origin_w = 2;
    int step_h = 1, step_w = 0;  // per-frame shift, toroidal
    bool whole_frame = true;
    double base_gain = 2.2;        // shared direction, dominant energy
    double subject_gain = 0.55;    // indicator-channel bump on sprite cells
    double signature_gain = 0.55;  // per-cell sprite identity
    double background_gain = 0.35; // smooth field amplitude
    double subject_drift = 0.0;    // attenuates sprite identity in the clip only
    std::vector<std::size_t> subject_channels = {0, 16, 32, 48};
    std::uint64_t seed = 1;

    void validate() const;
};

enum class FlowDirection { RefToGen, GenToRef };

// Hard nearest-cell flow on one lattice. RefToGen lives on the clip lattice:
// match[p] names the reference cell whose content now sits at clip cell p
// (that is the gather index for warping). GenToRef lives on the reference
// lattice and points into the clip.
struct FlowField {
    GridDims grid;
    FlowDirection dir = FlowDirection::RefToGen;
    std::vector<std::size_t> match;  // per anchor token: flat h*W+w in-frame cell

    void validate() const;
    // displacement (source - anchor) in cells for anchor token index i
    std::pair<int, int> displacement(std::size_t i) const;
};

struct Scene {
    SceneParams params;
    Tensor video;      // [F, H, W, c]
    Tensor reference;  // [1, H, W, c], sprite at its canonical origin
    std::vector<std::pair<int, int>> shift;  // per frame (dh, dw) vs reference
};

Scene make_scene(const SceneParams& params);

// reference image repeated along the frame axis, the shape the samplers expect
Tensor repeat_reference(const Scene& scene, std::size_t frames);

FlowField gt_flow(const Scene& scene, FlowDirection dir);

// 0/1 per clip token, sprite footprint
Tensor gt_mask(const Scene& scene);
// sprite footprint on the reference frame, [H*W]
Tensor gt_reference_mask(const Scene& scene);

// single-frame adaptation references: the canonical reference plus toroidally
// re-placed copies of the same subject, each [1, H, W, c]
std::vector<Tensor> make_reference_set(const Scene& scene, std::size_t count);

void save_scene(const std::filesystem::path& dir, const Scene& scene);
Scene load_scene(const std::filesystem::path& dir);

}  // namespace warpkit
