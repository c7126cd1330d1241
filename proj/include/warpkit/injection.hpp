#pragma once

#include <limits>

#include "warpkit/adaptation.hpp"
#include "warpkit/masking.hpp"

namespace warpkit {

enum class Strategy { None, ValueWarp, KvReplace, TokenConcat };

Strategy strategy_from_name(const std::string& name);
const char* strategy_name(Strategy s);

// fractional band over a 1-based index range; the epsilon keeps rational
// endpoints like 29/42 from falling off the intended integer
struct BandSpec {
    double lo = 0.0;
    double hi = 0.0;
};

std::pair<std::size_t, std::size_t> band_range(const BandSpec& band, std::size_t n);

struct InjectionConfig {
    Strategy strategy = Strategy::ValueWarp;
    BandSpec step_band{0.06, 0.38};
    BandSpec layer_band{20.0 / 42.0, 29.0 / 42.0};
    // descriptor source layer, 0-based; -1 picks the model default
    int descriptor_layer = -1;
    MaskConfig mask;
};

// v_warp[p] = v_ref[match(p)]: whole-row gather along the flow, per frame
Tensor warp_values(const Tensor& v_ref, const FlowField& ref_to_gen);

// row selection: mask row -> warped, else generated; never does arithmetic,
// so unmasked rows stay bit-identical
Tensor blend_values(const Tensor& v_warp, const Tensor& v_gen, const Tensor& mask);

// dual attention over swapped key/value sets; text keys always stay visible.
// k_ref_vid/v_ref_vid are the reference branch's video rows at this layer.
Tensor kv_replacement_attention(const Tensor& q, const Tensor& k_gen,
                                const Tensor& v_gen, const Tensor& k_ref_vid,
                                const Tensor& v_ref_vid, const Tensor& mask,
                                std::size_t heads, std::size_t n_video);

// widened attention: reference video tokens join the key/value set at their
// original grid positions and compete with the generated tokens
Tensor token_concat_attention(const Tensor& q, const Tensor& k_gen,
                              const Tensor& v_gen, const Tensor& k_ref_vid,
                              const Tensor& v_ref_vid, std::size_t heads,
                              std::size_t n_video);

struct StepDiag {
    std::size_t step = 0;  // 1-based sampler step
    std::size_t t = 0;     // schedule timestep
    bool banded = false;
    bool injected = false;
    bool fallback = false;  // banded but the combined mask was empty
    std::size_t fg_count = 0;
    std::size_t cc_count = 0;
    std::size_t mask_count = 0;
    std::size_t leak_count = 0;  // injected rows outside the predicted foreground
    double fidelity = std::numeric_limits<double>::quiet_NaN();
    double pck_vs_gt = std::numeric_limits<double>::quiet_NaN();
};

// masks and flow of one injected step, for file dumps
struct StepArtifacts {
    std::size_t step = 0;
    Tensor fg, cc, mt;
    FlowField flow;
};

struct DualBranchResult {
    Tensor video;  // final latent [F, H, W, c]
    std::vector<StepDiag> steps;
    std::vector<StepArtifacts> artifacts;
    std::size_t injected_steps = 0;
    std::size_t fallback_steps = 0;
    // value-stream fidelity against the true match, averaged over banded
    // steps; NaN when the strategy has no per-token video value stream
    double mean_fidelity = std::numeric_limits<double>::quiet_NaN();
};

// Coarse-to-fine generation: DDIM-invert the repeated reference, then sample
// the clip while splicing reference appearance into the banded layers/steps.
// Matching uses rotary-free q/k descriptors from the previous sampler step;
// `oracle` (optional) unlocks fidelity probes and flow scoring against the
// scene's analytic ground truth. `teacher` (optional, [F,H,W,c]) pins the
// generation branch to the noised teacher clip at every step instead of
// free sampling, which keeps its descriptors content-bearing; evaluation
// commands use it so masks and flows can be scored against a known clip.
DualBranchResult run_dual_branch(const Model& model, const Schedule& sched,
                                 const AdapterSet* adapters,
                                 const SubjectToken* subject,
                                 const std::vector<std::size_t>& prompt,
                                 const Tensor& reference_latent,
                                 const InjectionConfig& cfg, std::uint64_t seed,
                                 const Scene* oracle = nullptr,
                                 const Tensor* teacher = nullptr);

}  // namespace warpkit
