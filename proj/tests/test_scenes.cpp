#include <algorithm>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "warpkit/error.hpp"
#include "warpkit/scenes.hpp"

using namespace warpkit;
namespace fs = std::filesystem;

namespace {

const bool f64_default = [] {
    set_default_dtype(DType::F64);
    return true;
}();

SceneParams small_params() {
    SceneParams p;
    p.grid = GridDims{3, 6, 6};
    p.channels = 8;
    p.sprite = 2;
    p.origin_h = 1;
    p.origin_w = 2;
    p.step_h = 1;
    p.step_w = 1;
    p.subject_channels = {0, 4};
    p.seed = 3;
    return p;
}

}  // namespace

TEST_CASE("scene parameter validation") {
    SceneParams p = small_params();
    p.validate();

    SceneParams bad = p;
    bad.sprite = 7;  // larger than the 6-cell grid side
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = p;
    bad.subject_channels = {99};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = p;
    bad.subject_drift = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = p;
    bad.grid.frames = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("scene tensors have the advertised shapes") {
    SceneParams p = small_params();
    Scene s = make_scene(p);
    REQUIRE(s.video.rank() == 4);
    CHECK(s.video.dim(0) == 3);
    CHECK(s.video.dim(1) == 6);
    CHECK(s.video.dim(2) == 6);
    CHECK(s.video.dim(3) == 8);
    CHECK(s.reference.dim(0) == 1);
    REQUIRE(s.shift.size() == 3);
    // frame f sits at origin + f * step
    for (std::size_t f = 0; f < 3; ++f) {
        CHECK(s.shift[f].first == static_cast<int>(f) * p.step_h);
        CHECK(s.shift[f].second == static_cast<int>(f) * p.step_w);
    }

    Tensor rep = repeat_reference(s, 4);
    CHECK(rep.dim(0) == 4);
    for (std::size_t i = 0; i < s.reference.numel(); ++i) {
        CHECK(rep[i] == s.reference[i]);
        CHECK(rep[3 * s.reference.numel() + i] == s.reference[i]);
    }
}

TEST_CASE("whole-frame flow is a bijection matching the analytic shift") {
    SceneParams p = small_params();
    p.whole_frame = true;
    Scene s = make_scene(p);
    FlowField flow = gt_flow(s, FlowDirection::RefToGen);
    flow.validate();
    REQUIRE(flow.match.size() == p.grid.tokens());

    for (std::size_t f = 0; f < p.grid.frames; ++f) {
        std::set<std::size_t> seen;
        for (std::size_t cell = 0; cell < p.grid.per_frame(); ++cell) {
            std::size_t src = flow.match[f * p.grid.per_frame() + cell];
            CHECK(src < p.grid.per_frame());
            seen.insert(src);
            // clip cell (r,c) carries reference cell (r - dh, c - dw) mod side
            int r = static_cast<int>(cell / p.grid.w);
            int c = static_cast<int>(cell % p.grid.w);
            int H = static_cast<int>(p.grid.h), W = static_cast<int>(p.grid.w);
            int sr = ((r - s.shift[f].first) % H + H) % H;
            int sc = ((c - s.shift[f].second) % W + W) % W;
            CHECK(src == static_cast<std::size_t>(sr * W + sc));
        }
        CHECK(seen.size() == p.grid.per_frame());  // per-frame permutation
    }

    // warping the reference through the flow reproduces the clip exactly
    for (std::size_t f = 0; f < p.grid.frames; ++f)
        for (std::size_t cell = 0; cell < p.grid.per_frame(); ++cell) {
            std::size_t src = flow.match[f * p.grid.per_frame() + cell];
            for (std::size_t ch = 0; ch < p.channels; ++ch) {
                double clip = s.video[(f * p.grid.per_frame() + cell) * p.channels + ch];
                double ref = s.reference[src * p.channels + ch];
                CHECK(clip == doctest::Approx(ref).epsilon(1e-12));
            }
        }
}

TEST_CASE("displacement reports the toroidal shift") {
    SceneParams p = small_params();
    Scene s = make_scene(p);
    FlowField flow = gt_flow(s, FlowDirection::RefToGen);
    // frame 2 carries shift (2, 2): displacement = source - anchor = (-2, -2)
    std::size_t anchor = 2 * p.grid.per_frame() + 3 * p.grid.w + 3;
    auto [dr, dc] = flow.displacement(anchor);
    CHECK(dr == -2);
    CHECK(dc == -2);
}

TEST_CASE("sprite mode: background keeps identity flow, sprite moves") {
    SceneParams p = small_params();
    p.whole_frame = false;
    Scene s = make_scene(p);
    Tensor fg = gt_mask(s);
    REQUIRE(fg.numel() == p.grid.tokens());
    FlowField flow = gt_flow(s, FlowDirection::RefToGen);

    std::size_t fg_count = 0;
    for (std::size_t i = 0; i < p.grid.tokens(); ++i) {
        if (fg[i] == 1.0) {
            ++fg_count;
        } else {
            CHECK(fg[i] == 0.0);
            // static background: the flow stays put
            CHECK(flow.match[i] == i % p.grid.per_frame());
        }
    }
    CHECK(fg_count == p.sprite * p.sprite * p.grid.frames);

    Tensor ref_fg = gt_reference_mask(s);
    REQUIRE(ref_fg.numel() == p.grid.per_frame());
    std::size_t ref_count = 0;
    for (std::size_t i = 0; i < ref_fg.numel(); ++i)
        if (ref_fg[i] == 1.0) ++ref_count;
    CHECK(ref_count == p.sprite * p.sprite);

    // sprite cells map back to the sprite footprint on the reference
    for (std::size_t i = 0; i < p.grid.tokens(); ++i)
        if (fg[i] == 1.0) CHECK(ref_fg[flow.match[i]] == 1.0);
}

TEST_CASE("reverse flow points from reference cells into each frame") {
    SceneParams p = small_params();
    Scene s = make_scene(p);
    FlowField fwd = gt_flow(s, FlowDirection::RefToGen);
    FlowField rev = gt_flow(s, FlowDirection::GenToRef);
    rev.validate();
    REQUIRE(rev.match.size() == p.grid.tokens());
    // the two directions are mutually inverse per frame on a bijective scene
    for (std::size_t f = 0; f < p.grid.frames; ++f)
        for (std::size_t cell = 0; cell < p.grid.per_frame(); ++cell) {
            std::size_t src = fwd.match[f * p.grid.per_frame() + cell];
            CHECK(rev.match[f * p.grid.per_frame() + src] == cell);
        }
}

TEST_CASE("subject drift attenuates sprite identity in the clip only") {
    SceneParams p = small_params();
    Scene plain = make_scene(p);
    SceneParams d = p;
    d.subject_drift = 0.6;
    Scene drifted = make_scene(d);

    CHECK(bit_equal(drifted.reference, plain.reference));
    CHECK(!bit_equal(drifted.video, plain.video));

    // background cells are untouched by drift
    Tensor fg = gt_mask(plain);
    for (std::size_t i = 0; i < p.grid.tokens(); ++i)
        if (fg[i] == 0.0)
            for (std::size_t ch = 0; ch < p.channels; ++ch)
                CHECK(drifted.video[i * p.channels + ch] ==
                      plain.video[i * p.channels + ch]);
}

TEST_CASE("subject channels carry the indicator bump") {
    SceneParams p = small_params();
    p.whole_frame = false;
    Scene s = make_scene(p);
    Tensor fg = gt_mask(s);

    // averaged over the sprite, indicator channels sit above background cells
    double fg_mean = 0.0, bg_mean = 0.0;
    std::size_t nf = 0, nb = 0;
    for (std::size_t i = 0; i < p.grid.tokens(); ++i)
        for (std::size_t ch : p.subject_channels) {
            double v = s.video[i * p.channels + ch];
            if (fg[i] == 1.0) {
                fg_mean += v;
                ++nf;
            } else {
                bg_mean += v;
                ++nb;
            }
        }
    fg_mean /= static_cast<double>(nf);
    bg_mean /= static_cast<double>(nb);
    CHECK(fg_mean > bg_mean + 0.25);
}

TEST_CASE("reference sets are distinct placements of the same sprite") {
    SceneParams p = small_params();
    Scene s = make_scene(p);
    std::vector<Tensor> refs = make_reference_set(s, 4);
    REQUIRE(refs.size() == 4);
    CHECK(bit_equal(refs[0], s.reference));
    for (auto& r : refs) {
        CHECK(r.rank() == 4);
        CHECK(r.dim(0) == 1);
    }
    for (std::size_t i = 1; i < refs.size(); ++i)
        CHECK(!bit_equal(refs[i], refs[0]));
}

TEST_CASE("scenes save and load bit-exactly") {
    SceneParams p = small_params();
    p.whole_frame = false;
    p.subject_drift = 0.25;
    Scene s = make_scene(p);
    fs::path dir = fs::temp_directory_path() / "warpkit_scene_test";
    fs::create_directories(dir);
    save_scene(dir, s);
    Scene back = load_scene(dir);

    CHECK(bit_equal(back.video, s.video));
    CHECK(bit_equal(back.reference, s.reference));
    REQUIRE(back.shift.size() == s.shift.size());
    for (std::size_t f = 0; f < s.shift.size(); ++f) {
        CHECK(back.shift[f].first == s.shift[f].first);
        CHECK(back.shift[f].second == s.shift[f].second);
    }
    CHECK(back.params.sprite == p.sprite);
    CHECK(back.params.whole_frame == p.whole_frame);
    CHECK(back.params.subject_drift == p.subject_drift);
    CHECK(back.params.subject_channels == p.subject_channels);
    // the loaded params regenerate the identical scene
    Scene regen = make_scene(back.params);
    CHECK(bit_equal(regen.video, s.video));
}

TEST_CASE("flow validation catches malformed fields") {
    FlowField f;
    f.grid = GridDims{1, 2, 2};
    f.match = {0, 1, 2};  // wrong length
    CHECK_THROWS_AS(f.validate(), ShapeError);
    f.match = {0, 1, 2, 4};  // out of range cell
    CHECK_THROWS_AS(f.validate(), ShapeError);
    f.match = {0, 1, 2, 3};
    f.validate();
}
