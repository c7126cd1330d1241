#pragma once

#include <functional>
#include <optional>

#include "warpkit/autograd.hpp"
#include "warpkit/rope.hpp"
#include "warpkit/tensor.hpp"

namespace warpkit {

struct AdapterSet;    // adaptation.hpp
struct SubjectToken;  // adaptation.hpp

struct ModelConfig {
    std::size_t layers = 8;
    std::size_t dim = 64;    // token width
    std::size_t heads = 4;
    std::size_t frames = 4;  // default clip length; forward accepts any count
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::size_t text_len = 8;
    std::size_t vocab = 64;     // last id is the reserved subject slot
    std::size_t channels = 64;  // latent channels; one cell = one token
    std::size_t mlp_mult = 4;
    RopeConfig rope;
    bool rope_enabled = true;

    std::size_t head_dim() const { return dim / heads; }
    std::size_t video_tokens() const { return frames * grid_h * grid_w; }
    std::size_t seq_len() const { return video_tokens() + text_len; }
    std::size_t subject_id() const { return vocab - 1; }
    void validate() const;
};

struct LayerWeights {
    Tensor attn_gain;  // [d]
    Tensor wq, wk, wv, wo;  // [d,d]; projections act as x * W
    Tensor mlp_gain;   // [d]
    Tensor w1;         // [d, mlp_mult*d]
    Tensor w2;         // [mlp_mult*d, d]
};

struct Weights {
    Tensor patch_proj;  // [c, d]
    Tensor embed;       // [vocab, d]
    Tensor time_proj;   // [d, d]
    std::vector<LayerWeights> layers;
    Tensor final_gain;  // [d]
    Tensor head;        // [d, c]

    std::uint64_t checksum() const;  // bit-level, order-stable
};

// Everything an attention layer computed, for diagnostics and downstream
// matching. q_pre/k_pre are the rotary-free descriptors.
struct LayerTrace {
    Tensor q_pre, k_pre, v;  // [S, d]
    Tensor q_post, k_post;   // [S, d] after rotary phases
    Tensor probs;            // [heads, S, S], native routing (pre-override)
    Tensor out;              // [S, d] residual stream after the block
};

// Tensors handed to an attention override; all [S, d] with heads concatenated.
struct AttentionTensors {
    const Tensor& q_rot;
    const Tensor& k_rot;
    const Tensor& v;
    std::size_t n_video = 0;
    std::size_t heads = 0;
};

// Inference-time edits. Returning an empty optional leaves the layer alone.
// value_override sees the video rows of V and may replace them; an
// attention_override replaces the pre-output-projection attention result.
struct InjectionHooks {
    std::function<std::optional<Tensor>(std::size_t layer, const Tensor& v_video)>
        value_override;
    std::function<std::optional<Tensor>(std::size_t layer, const AttentionTensors&)>
        attention_override;
};

struct ForwardOptions {
    const AdapterSet* adapters = nullptr;
    const SubjectToken* subject = nullptr;
    const InjectionHooks* hooks = nullptr;
    bool capture_trace = false;
    // register adapter/token tensors as differentiable leaves (training)
    bool train = false;
};

struct AdapterVars {
    std::size_t layer;
    int site;  // ProjSite as int to avoid the include cycle
    Var down, up;
};

struct ForwardResult {
    Var eps;  // [N, c] per-token prediction; reshape to [F,H,W,c] as needed
    std::vector<LayerTrace> traces;
    std::vector<AdapterVars> adapter_vars;  // filled when train
    Var token_var;                          // valid when train && subject
};

// plain softmax(q k^T / sqrt(head_dim)) v over concatenated heads, used by
// oracles and the injection strategies; key_mask (optional, per key) hides
// keys by pushing their logits to -inf
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, const std::vector<std::uint8_t>* key_mask = nullptr);

class Model {
public:
    Model(ModelConfig cfg, Weights w);

    static Model random_init(const ModelConfig& cfg, std::uint64_t seed);
    // test-mode weights: projections identity (value scaled down), mlp zero,
    // unit gains, identity patchify/head, so tokens stay content-aligned
    static Model content_identity(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const Weights& weights() const { return w_; }
    const Rope& rope() const { return rope_; }

    // latent [F', H, W, c] (any frame count), prompt ids of length text_len
    ForwardResult forward(GradTape& tape, const Tensor& latent,
                          const std::vector<std::size_t>& prompt, std::size_t t,
                          const ForwardOptions& opts = {}) const;

    std::vector<GridPos> video_positions(std::size_t frames) const;
    std::vector<GridPos> sequence_positions(std::size_t frames) const;
    // descriptor layer used for matching when not configured: floor(L/2)-1
    std::size_t default_descriptor_layer() const;

private:
    ModelConfig cfg_;
    Weights w_;
    Rope rope_;
};

}  // namespace warpkit
