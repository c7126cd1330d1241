#pragma once

#include <filesystem>

#include "warpkit/diffusion.hpp"
#include "warpkit/mmdit.hpp"

namespace warpkit {

// Projection sites an adapter can hang off. Query exists so that asking for
// it can be rejected: query adaptation shifts the attention routing and is
// deliberately unsupported.
enum class ProjSite : int { Query = 0, Key = 1, Value = 2, Output = 3 };

const char* proj_site_name(ProjSite site);

// Low-rank update W_eff = W + scale * down * up with down [d,r] Gaussian
// (std 0.02) and up [r,d] zero, so training starts as a no-op.
struct LoraAdapter {
    std::size_t layer = 0;
    ProjSite site = ProjSite::Key;
    std::size_t rank = 0;
    double scale = 1.0;
    Tensor down;  // [d, r]
    Tensor up;    // [r, d]

    static LoraAdapter init(std::size_t layer, ProjSite site, std::size_t dim,
                            std::size_t rank, SeededRng& rng);
};

// requested rank is clipped so the factors stay genuinely low-rank at toy width
std::size_t effective_rank(std::size_t requested, std::size_t dim);

Tensor apply_lora(const Tensor& w, const LoraAdapter& adapter);

class AdapterSet {
public:
    void add(LoraAdapter adapter);  // one adapter per (layer, site)
    const LoraAdapter* find(std::size_t layer, ProjSite site) const;
    LoraAdapter* find(std::size_t layer, ProjSite site);
    const std::vector<LoraAdapter>& all() const { return adapters_; }
    std::vector<LoraAdapter>& all() { return adapters_; }
    bool empty() const { return adapters_.empty(); }

    // K/V/O adapters for every layer, fresh init
    static AdapterSet full(const ModelConfig& cfg, std::size_t rank, SeededRng& rng);

private:
    std::vector<LoraAdapter> adapters_;
};

// Learnable embedding for the reserved vocab slot.
struct SubjectToken {
    std::size_t vocab_id = 0;
    Tensor embedding;  // [d]

    static SubjectToken init(const ModelConfig& cfg, const Weights& w);
};

struct TrainConfig {
    std::size_t steps = 100;
    std::size_t rank = 128;  // clipped via effective_rank
    double adapter_lr = 1e-4;
    double token_lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    std::size_t pool = 10;  // (reference, timestep, noise) tuples cycled in order
    std::uint64_t seed = 0;
};

struct AdamState {
    Tensor m, v;
    std::size_t step = 0;
};

// decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
void adamw_step(Tensor& param, const Tensor& grad, AdamState& state, double lr,
                const TrainConfig& cfg);

struct TrainResult {
    AdapterSet adapters;
    SubjectToken token;
    std::vector<double> loss_curve;
};

// Coarse image-only pass: adapters on K/V/O plus the subject embedding, base
// weights untouched. references are single-frame latents [1,H,W,c].
TrainResult train_coarse(const Model& model, const Schedule& sched,
                         const std::vector<Tensor>& references,
                         const std::vector<std::size_t>& prompt,
                         const TrainConfig& cfg);

// checkpoint directory: manifest + one tensor file per factor
void save_checkpoint(const std::filesystem::path& dir, const AdapterSet& adapters,
                     const SubjectToken& token, const ModelConfig& cfg,
                     const std::vector<double>& loss_curve);

struct Checkpoint {
    AdapterSet adapters;
    SubjectToken token;
    std::vector<double> loss_curve;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg);

}  // namespace warpkit
