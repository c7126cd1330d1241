#include "warpkit/diffusion.hpp"

#include <cmath>

#include "warpkit/error.hpp"
#include "warpkit/kvfile.hpp"
#include "warpkit/tensor_io.hpp"

namespace warpkit {

Schedule Schedule::linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 2) throw ConfigError("schedule: need at least 2 steps");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("schedule: want 0 < beta_start <= beta_end < 1");
    Schedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alpha_bars.resize(steps + 1);
    s.alpha_bars[0] = 1.0;
    for (std::size_t t = 1; t <= steps; ++t) {
        double beta = beta_start + (beta_end - beta_start) *
                                       static_cast<double>(t - 1) /
                                       static_cast<double>(steps - 1);
        s.betas[t - 1] = beta;
        s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - beta);
    }
    return s;
}

double Schedule::alpha_bar(std::size_t t) const {
    if (t >= alpha_bars.size())
        throw ConfigError("schedule: timestep " + std::to_string(t) + " > " +
                          std::to_string(steps));
    return alpha_bars[t];
}

Tensor add_noise(const Schedule& sched, const Tensor& x0, const Tensor& eps,
                 std::size_t t) {
    if (t < 1 || t > sched.steps)
        throw ConfigError("add_noise: timestep out of [1, T]");
    if (!x0.same_shape(eps))
        throw ShapeError("add_noise: " + x0.shape_str() + " vs " + eps.shape_str());
    double ab = sched.alpha_bar(t);
    return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor ddim_retarget(const Schedule& sched, const Tensor& x, const Tensor& eps_hat,
                     std::size_t from, std::size_t to) {
    if (!x.same_shape(eps_hat))
        throw ShapeError("ddim_retarget: latent/eps shape mismatch");
    double ab_from = sched.alpha_bar(from);
    double ab_to = sched.alpha_bar(to);
    double s_from = std::sqrt(ab_from), n_from = std::sqrt(1.0 - ab_from);
    double s_to = std::sqrt(ab_to), n_to = std::sqrt(1.0 - ab_to);
    Tensor out(x.shape(), x.dtype() == DType::F64 || eps_hat.dtype() == DType::F64
                              ? DType::F64
                              : DType::F32);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double x0_hat = (x[i] - n_from * eps_hat[i]) / s_from;
        out[i] = s_to * x0_hat + n_to * eps_hat[i];
    }
    out.seal();
    return out;
}

Tensor ddim_step(const Schedule& sched, const Tensor& x, const Tensor& eps_hat,
                 std::size_t from, std::size_t to) {
    if (from < to) throw ConfigError("ddim_step: runs in sampling direction only");
    if (from > sched.steps) throw ConfigError("ddim_step: timestep beyond schedule");
    return ddim_retarget(sched, x, eps_hat, from, to);
}

const Tensor& Trajectory::at(std::size_t t) const {
    // labels are T..0, so index by offset from the top
    if (timesteps.empty() || t > timesteps.front())
        throw ConfigError("trajectory: no latent for timestep " + std::to_string(t));
    std::size_t idx = timesteps.front() - t;
    if (idx >= timesteps.size() || timesteps[idx] != t)
        throw ConfigError("trajectory: no latent for timestep " + std::to_string(t));
    return latents[idx];
}

void Trajectory::validate() const {
    if (timesteps.size() != latents.size())
        throw ConfigError("trajectory: label/latent count mismatch");
    if (timesteps.empty()) throw ConfigError("trajectory: empty");
    for (std::size_t i = 1; i < timesteps.size(); ++i) {
        if (timesteps[i] >= timesteps[i - 1])
            throw ConfigError("trajectory: timesteps must strictly decrease");
        if (!latents[i].same_shape(latents[0]))
            throw ShapeError("trajectory: latent shape drift");
    }
}

Trajectory ddim_invert(const Schedule& sched, const Model& model,
                       const ForwardOptions& opts, const Tensor& x0,
                       const std::vector<std::size_t>& prompt,
                       std::size_t refine) {
    Trajectory traj;
    traj.timesteps.resize(sched.steps + 1);
    traj.latents.resize(sched.steps + 1);
    Tensor x = x0;
    traj.timesteps[sched.steps] = 0;
    traj.latents[sched.steps] = x;
    for (std::size_t t = 1; t <= sched.steps; ++t) {
        const Tensor prev = x;
        {
            GradTape tape(false);
            ForwardResult fw = model.forward(tape, x, prompt, t - 1, opts);
            x = ddim_retarget(sched, x, fw.eps.value().reshaped(x.shape()), t - 1, t);
        }
        // Fixed-point polish: the naive step uses eps(x_{t-1}, t-1) while the
        // sampler will consume eps(x_t, t). Re-solving x_t = renoise(prev,
        // eps(x_t, t)) makes the later sampling step land exactly on prev.
        for (std::size_t k = 0; k < refine; ++k) {
            GradTape tape(false);
            ForwardResult fw = model.forward(tape, x, prompt, t, opts);
            x = ddim_retarget(sched, prev, fw.eps.value().reshaped(x.shape()),
                              t - 1, t);
        }
        traj.timesteps[sched.steps - t] = t;
        traj.latents[sched.steps - t] = x;
    }
    traj.validate();
    return traj;
}

Tensor ddim_sample(const Schedule& sched, const Model& model,
                   const ForwardOptions& opts, const Tensor& x_start,
                   const std::vector<std::size_t>& prompt,
                   const std::function<void(std::size_t, std::size_t,
                                            const Tensor&)>& per_step) {
    Tensor x = x_start;
    for (std::size_t s = 1; s <= sched.steps; ++s) {
        std::size_t t = sched.steps - s + 1;
        GradTape tape(false);
        ForwardResult fw = model.forward(tape, x, prompt, t, opts);
        Tensor eps = fw.eps.value().reshaped(x.shape());
        x = ddim_step(sched, x, eps, t, t - 1);
        if (per_step) per_step(s, t, x);
    }
    return x;
}

Tensor initial_noise(const std::vector<std::size_t>& latent_shape,
                     std::uint64_t seed) {
    SeededRng rng = SeededRng(seed).split(0xA11CE);
    return Tensor::gaussian(latent_shape, rng);
}

Var epsilon_loss(GradTape& tape, const Schedule& sched, const Model& model,
                 const ForwardOptions& opts, const Tensor& x0,
                 const std::vector<std::size_t>& prompt, std::size_t t,
                 const Tensor& eps, ForwardResult* out_fwd) {
    Tensor x_t = add_noise(sched, x0, eps, t);
    ForwardResult fw = model.forward(tape, x_t, prompt, t, opts);
    const std::size_t n_video = x0.dim(0) * x0.dim(1) * x0.dim(2);
    Var target = tape.constant(eps.reshaped({n_video, x0.dim(3)}));
    Var loss = tape.mse(fw.eps, target);
    if (out_fwd) *out_fwd = std::move(fw);
    return loss;
}

void save_trajectory(const std::filesystem::path& dir, const Trajectory& traj) {
    traj.validate();
    std::filesystem::create_directories(dir);
    KvFile kv("wk-traj-1");
    kv.set_int("count", static_cast<long long>(traj.timesteps.size()));
    for (std::size_t i = 0; i < traj.timesteps.size(); ++i) {
        kv.set_int("t." + std::to_string(i), static_cast<long long>(traj.timesteps[i]));
        save_tensor(dir / ("latent_" + std::to_string(traj.timesteps[i]) + ".wkt"),
                    traj.latents[i]);
    }
    kv.save(dir / "trajectory.kv");
}

Trajectory load_trajectory(const std::filesystem::path& dir) {
    KvFile kv = KvFile::load(dir / "trajectory.kv", "wk-traj-1");
    std::size_t count = static_cast<std::size_t>(kv.get_int("count"));
    Trajectory traj;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t t =
            static_cast<std::size_t>(kv.get_int("t." + std::to_string(i)));
        traj.timesteps.push_back(t);
        traj.latents.push_back(
            load_tensor(dir / ("latent_" + std::to_string(t) + ".wkt")));
    }
    traj.validate();
    return traj;
}

}  // namespace warpkit
