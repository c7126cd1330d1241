#pragma once

#include "warpkit/diffusion.hpp"
#include "warpkit/mmdit.hpp"
#include "warpkit/scenes.hpp"

namespace warpkit {

// Row-stochastic matching scores between two branches, one matrix per frame
// (tokens only ever match within their own frame).
struct Correlation {
    GridDims grid;
    std::vector<Tensor> frames;  // each [H*W, H*W]; rows = a-side, cols = b-side

    void validate() const;
};

// softmax_j(q_a[i] . k_b[j] / sqrt(width)) per frame; qa/kb are [N, width]
// descriptor stacks on the same grid
Correlation directional_correlation(const Tensor& qa, const Tensor& kb,
                                    const GridDims& grid);

// 0.5 * (C_ab + C_ba^T): symmetrised map oriented rows=a, cols=b
Correlation symmetric_correlation(const Correlation& ab, const Correlation& ba);

// hard assignment by row/col argmax (ties -> smallest index).
// RefToGen anchors rows (one match per a-token); GenToRef anchors columns.
FlowField extract_flow(const Correlation& sym, FlowDirection dir);

// independent oracle for extract_flow: plain nested loops over raw values
FlowField brute_force_match(const Correlation& sym, FlowDirection dir);

// distance of the flow round trip a -> b -> a, one value per a-side token
Tensor cycle_error(const FlowField& ref_to_gen, const FlowField& gen_to_ref);

struct PckResult {
    double value = 0.0;
    std::size_t evaluated = 0;
};

// fraction of mask-selected anchors whose predicted match lands within
// alpha * max(H, W) cells of the true match
PckResult pck(const FlowField& pred, const FlowField& truth, const Tensor& fg_mask,
              double alpha);

// ---- descriptor sweep -------------------------------------------------------

// what to read out of a layer trace as the matching descriptor
enum class DescriptorKind { QkRopeFree, Qk, Hidden };

const char* descriptor_kind_name(DescriptorKind kind);

struct SweepRow {
    std::size_t layer = 0;
    DescriptorKind kind = DescriptorKind::QkRopeFree;
    std::size_t timestep = 0;
    double pck = 0.0;
    std::size_t foreground = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::size_t best_layer = 0;
    DescriptorKind best_kind = DescriptorKind::QkRopeFree;
    double best_pck = -1.0;
};

// Noises the clip and the repeated reference to each listed timestep, runs
// both branches once, and scores every (layer, kind) against the analytic
// flow over the sprite foreground.
SweepResult descriptor_sweep(const Model& model, const Schedule& sched,
                             const Scene& scene,
                             const std::vector<std::size_t>& prompt,
                             const std::vector<std::size_t>& timesteps,
                             double alpha, std::uint64_t seed);

// descriptors for one branch at one layer: video rows of the relevant traces
std::pair<Tensor, Tensor> descriptors_from_trace(const LayerTrace& trace,
                                                 DescriptorKind kind,
                                                 std::size_t n_video);

void save_flow_csv(const std::filesystem::path& path, const FlowField& flow);
void save_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep);

}  // namespace warpkit
