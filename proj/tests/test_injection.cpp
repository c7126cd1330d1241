#include <cmath>
#include <vector>

#include "doctest.h"
#include "warpkit/error.hpp"
#include "warpkit/injection.hpp"
#include "warpkit/pipeline.hpp"
#include "warpkit/rng.hpp"

using namespace warpkit;

namespace {

const bool f64_default = [] {
    set_default_dtype(DType::F64);
    return true;
}();

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.frames = 2;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    cfg.text_len = 4;
    cfg.vocab = 16;
    cfg.channels = 16;
    cfg.mlp_mult = 2;
    cfg.rope = RopeConfig{4, 2, 2, 100.0};
    return cfg;
}

SceneParams tiny_scene_params() {
    SceneParams sp;
    sp.grid = GridDims{2, 4, 4};
    sp.channels = 16;
    sp.sprite = 2;
    sp.origin_h = 0;
    sp.origin_w = 0;
    sp.step_h = 1;
    sp.step_w = 1;
    sp.subject_channels = {0, 8};
    sp.seed = 21;
    return sp;
}

std::vector<std::size_t> subject_prompt(const ModelConfig& cfg) {
    std::vector<std::size_t> p(cfg.text_len, 1);
    p[0] = cfg.subject_id();
    return p;
}

Tensor take_rows(const Tensor& t, std::size_t b, std::size_t e) {
    Tensor out({e - b, t.dim(1)}, t.dtype());
    for (std::size_t r = b; r < e; ++r)
        for (std::size_t c = 0; c < t.dim(1); ++c) out((r - b), c) = t(r, c);
    out.seal();
    return out;
}

Tensor stack_rows(const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0) + b.dim(0), a.dim(1)}, a.dtype());
    for (std::size_t r = 0; r < a.dim(0); ++r)
        for (std::size_t c = 0; c < a.dim(1); ++c) out(r, c) = a(r, c);
    for (std::size_t r = 0; r < b.dim(0); ++r)
        for (std::size_t c = 0; c < b.dim(1); ++c) out(a.dim(0) + r, c) = b(r, c);
    out.seal();
    return out;
}

}  // namespace

TEST_CASE("band ranges: frozen endpoints and edge cases") {
    // defaults used by the pipeline
    auto steps = band_range(BandSpec{0.06, 0.38}, 50);
    CHECK(steps.first == 3);
    CHECK(steps.second == 19);
    auto layers = band_range(BandSpec{20.0 / 42.0, 29.0 / 42.0}, 8);
    CHECK(layers.first == 4);
    CHECK(layers.second == 5);

    auto full = band_range(BandSpec{0.0, 1.0}, 10);
    CHECK(full.first == 1);
    CHECK(full.second == 10);

    // a sliver that catches no integer produces an empty band
    auto empty = band_range(BandSpec{0.01, 0.02}, 10);
    CHECK(empty.first > empty.second);

    CHECK_THROWS_AS(band_range(BandSpec{0.5, 0.2}, 10), ConfigError);
    CHECK_THROWS_AS(band_range(BandSpec{-0.1, 0.5}, 10), ConfigError);
    CHECK_THROWS_AS(band_range(BandSpec{0.1, 1.5}, 10), ConfigError);
}

TEST_CASE("strategy names round-trip and reject junk") {
    for (Strategy s : {Strategy::None, Strategy::ValueWarp, Strategy::KvReplace,
                       Strategy::TokenConcat})
        CHECK(strategy_from_name(strategy_name(s)) == s);
    CHECK_THROWS_AS(strategy_from_name("swizzle"), ConfigError);
}

TEST_CASE("warp_values gathers whole rows along the flow") {
    GridDims grid{2, 1, 2};  // 2 frames, 2 cells each
    const std::size_t d = 3;
    Tensor v_ref({4, d}, DType::F64);
    for (std::size_t i = 0; i < 4 * d; ++i) v_ref[i] = static_cast<double>(i);
    v_ref.seal();

    FlowField flow;
    flow.grid = grid;
    flow.dir = FlowDirection::RefToGen;
    flow.match = {1, 0, 0, 1};  // frame 0 swaps cells, frame 1 keeps order... reversed

    Tensor w = warp_values(v_ref, flow);
    REQUIRE(w.same_shape(v_ref));
    for (std::size_t c = 0; c < d; ++c) {
        CHECK(w(0, c) == v_ref(1, c));  // frame 0, cell 0 <- ref cell 1
        CHECK(w(1, c) == v_ref(0, c));
        CHECK(w(2, c) == v_ref(2, c));  // frame 1 rows gather within frame 1
        CHECK(w(3, c) == v_ref(3, c));
    }

    FlowField wrong = flow;
    wrong.dir = FlowDirection::GenToRef;
    CHECK_THROWS_AS(warp_values(v_ref, wrong), ContractError);

    Tensor bad = Tensor::zeros({3, d}, DType::F64);
    CHECK_THROWS_AS(warp_values(bad, flow), ShapeError);
}

TEST_CASE("blend_values selects rows without arithmetic") {
    SeededRng rng(1);
    Tensor warped = Tensor::gaussian({4, 3}, rng);
    Tensor gen = Tensor::gaussian({4, 3}, rng);
    Tensor mask = Tensor::from_values({4}, {1.0, 0.0, 0.0, 1.0});

    Tensor out = blend_values(warped, gen, mask);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(out(0, c) == warped(0, c));
        CHECK(out(1, c) == gen(1, c));
        CHECK(out(2, c) == gen(2, c));
        CHECK(out(3, c) == warped(3, c));
    }

    Tensor short_mask = Tensor::zeros({3}, DType::F64);
    CHECK_THROWS_AS(blend_values(warped, gen, short_mask), ShapeError);
}

TEST_CASE("kv replacement: masked queries read the reference values") {
    // single head, 2 video tokens + 1 text token, identity-style setup where
    // each query attends overwhelmingly to its own position
    const std::size_t S = 3, n_video = 2, d = 2;
    Tensor q({S, d}, DType::F64);
    Tensor k({S, d}, DType::F64);
    for (std::size_t i = 0; i < S; ++i) {
        q[i * d + i % d] = 25.0;  // strong self-selective codes on 2 dims
        k[i * d + i % d] = 25.0;
    }
    // token 2 (text) shares code 0 with token 0; separate it
    q[2 * d + 0] = 0.0;
    q[2 * d + 1] = 25.0;
    k[2 * d + 0] = 0.0;
    k[2 * d + 1] = 25.0;
    q.seal();
    k.seal();

    Tensor v_gen({S, d}, DType::F64);
    v_gen[0 * d + 0] = 10.0;
    v_gen[1 * d + 0] = 20.0;
    v_gen[2 * d + 0] = 30.0;
    v_gen.seal();
    Tensor k_ref = take_rows(k, 0, n_video);
    Tensor v_ref({n_video, d}, DType::F64);
    v_ref[0 * d + 0] = 111.0;
    v_ref[1 * d + 0] = 222.0;
    v_ref.seal();

    Tensor mask = Tensor::from_values({2}, {1.0, 0.0});
    Tensor out = kv_replacement_attention(q, k, v_gen, k_ref, v_ref, mask, 1, n_video);
    REQUIRE(out.dim(0) == S);

    // masked token 0 pulls from the reference value pool
    CHECK(out(0, 0) > 50.0);
    // unmasked token 1 stays on generated values
    CHECK(out(1, 0) < 50.0);

    Tensor bad_mask = Tensor::zeros({3}, DType::F64);
    CHECK_THROWS_AS(
        kv_replacement_attention(q, k, v_gen, k_ref, v_ref, bad_mask, 1, n_video),
        ShapeError);
}

TEST_CASE("token concat widens the key set with reference tokens") {
    const std::size_t S = 3, n_video = 2, d = 2;
    SeededRng rng(2);
    Tensor q = Tensor::gaussian({S, d}, rng);
    Tensor k = Tensor::gaussian({S, d}, rng);
    Tensor v = Tensor::gaussian({S, d}, rng);
    Tensor k_ref = Tensor::gaussian({n_video, d}, rng);
    Tensor v_ref = Tensor::gaussian({n_video, d}, rng);

    Tensor out = token_concat_attention(q, k, v, k_ref, v_ref, 1, n_video);
    REQUIRE(out.dim(0) == S);
    REQUIRE(out.dim(1) == d);

    // oracle: plain attention over the widened sequence
    Tensor k_wide = stack_rows(stack_rows(take_rows(k, 0, n_video), k_ref),
                               take_rows(k, n_video, S));
    Tensor v_wide = stack_rows(stack_rows(take_rows(v, 0, n_video), v_ref),
                               take_rows(v, n_video, S));
    Tensor want = attention(q, k_wide, v_wide, 1);
    CHECK(max_abs_diff(out, want) < 1e-12);
}

TEST_CASE("strategy none reproduces the plain sampler bit for bit") {
    ModelConfig mc = tiny_config();
    Model m = Model::random_init(mc, 31);
    Schedule sched = Schedule::linear(6, 1e-4, 2e-2);
    Scene scene = make_scene(tiny_scene_params());
    auto prompt = subject_prompt(mc);

    InjectionConfig ic;
    ic.strategy = Strategy::None;
    DualBranchResult r =
        run_dual_branch(m, sched, nullptr, nullptr, prompt,
                        tile_frames(scene.reference, 2), ic, 99);
    CHECK(r.injected_steps == 0);
    REQUIRE(r.steps.size() == 6);
    for (const StepDiag& s : r.steps) {
        CHECK(!s.banded);
        CHECK(!s.injected);
    }

    Tensor x0 = initial_noise({2, 4, 4, 16}, 99);
    Tensor plain = ddim_sample(sched, m, {}, x0, prompt);
    CHECK(bit_equal(r.video, plain));
}

TEST_CASE("an impossible foreground threshold forces clean fallback") {
    ModelConfig mc = tiny_config();
    Model m = Model::random_init(mc, 32);
    Schedule sched = Schedule::linear(6, 1e-4, 2e-2);
    Scene scene = make_scene(tiny_scene_params());
    auto prompt = subject_prompt(mc);

    InjectionConfig ic;
    ic.strategy = Strategy::ValueWarp;
    ic.step_band = BandSpec{0.3, 1.0};
    ic.layer_band = BandSpec{0.0, 1.0};
    ic.mask.tau_fg = 1.1;  // attention probabilities cannot reach it
    ic.mask.normalize = false;

    SubjectToken tok = SubjectToken::init(mc, m.weights());
    DualBranchResult r =
        run_dual_branch(m, sched, nullptr, &tok, prompt,
                        tile_frames(scene.reference, 2), ic, 99);
    CHECK(r.injected_steps == 0);
    CHECK(r.fallback_steps > 0);

    // a freshly initialised token equals the embedding row, so the fallback
    // trajectory must match the plain sampler exactly
    Tensor x0 = initial_noise({2, 4, 4, 16}, 99);
    Tensor plain = ddim_sample(sched, m, {}, x0, prompt);
    CHECK(bit_equal(r.video, plain));
}

TEST_CASE("teacher-forced run with oracle populates the diagnostics") {
    ModelConfig mc = tiny_config();
    Model m = Model::content_identity(mc);
    Schedule sched = Schedule::linear(8, 1e-4, 2e-2);
    Scene scene = make_scene(tiny_scene_params());
    auto prompt = subject_prompt(mc);

    InjectionConfig ic;
    ic.strategy = Strategy::ValueWarp;
    ic.step_band = BandSpec{0.7, 1.0};  // late, low-noise steps
    ic.layer_band = BandSpec{0.0, 1.0};
    ic.mask.tau_fg = 0.3;
    ic.mask.tau_cc = 0.5;

    SubjectToken tok = SubjectToken::init(mc, m.weights());
    DualBranchResult r =
        run_dual_branch(m, sched, nullptr, &tok, prompt,
                        tile_frames(scene.reference, 2), ic, 7, &scene,
                        &scene.video);
    CHECK(r.injected_steps + r.fallback_steps > 0);
    // teacher forcing ends exactly on the teacher clip
    CHECK(bit_equal(r.video, scene.video));

    bool saw_injected = false;
    for (const StepDiag& s : r.steps) {
        if (!s.injected) continue;
        saw_injected = true;
        CHECK(s.banded);
        CHECK(s.mask_count > 0);
        CHECK(s.fg_count >= s.mask_count);
        CHECK(std::isfinite(s.pck_vs_gt));
    }
    CHECK(saw_injected);
    if (r.injected_steps > 0) {
        CHECK(!r.artifacts.empty());
        const StepArtifacts& a = r.artifacts.front();
        CHECK(a.fg.numel() == 32);
        CHECK(a.mt.numel() == 32);
        a.flow.validate();
    }
}

TEST_CASE("input validation") {
    ModelConfig mc = tiny_config();
    Model m = Model::random_init(mc, 33);
    Schedule sched = Schedule::linear(4, 1e-4, 2e-2);
    Scene scene = make_scene(tiny_scene_params());
    InjectionConfig ic;
    ic.strategy = Strategy::ValueWarp;

    SubjectToken tok = SubjectToken::init(mc, m.weights());
    Tensor ref = tile_frames(scene.reference, 2);

    // prompt without the subject token cannot drive the foreground mask
    std::vector<std::size_t> plain(mc.text_len, 1);
    CHECK_THROWS_AS(
        run_dual_branch(m, sched, nullptr, &tok, plain, ref, ic, 1),
        ConfigError);

    // injection without any subject token at all is refused too
    CHECK_THROWS_AS(run_dual_branch(m, sched, nullptr, nullptr,
                                    subject_prompt(mc), ref, ic, 1),
                    ConfigError);

    // reference latent must match the model grid
    Tensor wrong = Tensor::zeros({2, 3, 4, 16}, DType::F64);
    CHECK_THROWS_AS(run_dual_branch(m, sched, nullptr, &tok,
                                    subject_prompt(mc), wrong, ic, 1),
                    ShapeError);

    // teacher shape must match the generated clip
    Tensor bad_teacher = Tensor::zeros({1, 4, 4, 16}, DType::F64);
    CHECK_THROWS_AS(run_dual_branch(m, sched, nullptr, &tok,
                                    subject_prompt(mc), ref, ic, 1, nullptr,
                                    &bad_teacher),
                    ShapeError);
}
