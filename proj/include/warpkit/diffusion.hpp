#pragma once

#include <filesystem>

#include "warpkit/mmdit.hpp"

namespace warpkit {

// Linear-beta schedule. Timesteps are 1-based: betas[t-1] belongs to t and
// alpha_bars[t] = prod_{s<=t}(1 - beta_s) with alpha_bars[0] = 1 (clean data).
struct Schedule {
    std::size_t steps = 0;
    std::vector<double> betas;       // [T]
    std::vector<double> alpha_bars;  // [T+1]

    static Schedule linear(std::size_t steps = 50, double beta_start = 1e-4,
                           double beta_end = 2e-2);
    double alpha_bar(std::size_t t) const;
};

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, 1 <= t <= steps
Tensor add_noise(const Schedule& sched, const Tensor& x0, const Tensor& eps,
                 std::size_t t);

// deterministic update between arbitrary noise levels (eta = 0):
// x0_hat = (x - sqrt(1-ab_from) eps) / sqrt(ab_from), then renoise to `to`
Tensor ddim_retarget(const Schedule& sched, const Tensor& x, const Tensor& eps_hat,
                     std::size_t from, std::size_t to);

// sampling direction only: from >= to
Tensor ddim_step(const Schedule& sched, const Tensor& x, const Tensor& eps_hat,
                 std::size_t from, std::size_t to);

// Latents indexed by strictly decreasing timestep labels T..0, so
// latent_at(t) is O(1) by position.
struct Trajectory {
    std::vector<std::size_t> timesteps;
    std::vector<Tensor> latents;

    const Tensor& at(std::size_t t) const;
    void validate() const;
};

// Walks x0 up to x_T using the model's own predictions at each known latent.
// refine > 0 runs that many fixed-point corrections per step so the forward
// sampler retraces the trajectory almost exactly (at refine+1x the cost).
Trajectory ddim_invert(const Schedule& sched, const Model& model,
                       const ForwardOptions& opts, const Tensor& x0,
                       const std::vector<std::size_t>& prompt,
                       std::size_t refine = 2);

// Plain deterministic sampler from x_T down to x0. per_step (optional) sees
// the freshly produced latent after each update.
Tensor ddim_sample(const Schedule& sched, const Model& model,
                   const ForwardOptions& opts, const Tensor& x_start,
                   const std::vector<std::size_t>& prompt,
                   const std::function<void(std::size_t step, std::size_t t,
                                            const Tensor& x)>& per_step = nullptr);

// starting noise for a generation run; shared by every sampler entry point so
// seeds line up across strategies
Tensor initial_noise(const std::vector<std::size_t>& latent_shape,
                     std::uint64_t seed);

// mean squared error between the model's prediction on add_noise(x0, eps, t)
// and eps itself; the training objective
Var epsilon_loss(GradTape& tape, const Schedule& sched, const Model& model,
                 const ForwardOptions& opts, const Tensor& x0,
                 const std::vector<std::size_t>& prompt, std::size_t t,
                 const Tensor& eps, ForwardResult* out_fwd = nullptr);

void save_trajectory(const std::filesystem::path& dir, const Trajectory& traj);
Trajectory load_trajectory(const std::filesystem::path& dir);

}  // namespace warpkit
