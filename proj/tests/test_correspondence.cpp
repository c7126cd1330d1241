#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "warpkit/correspondence.hpp"
#include "warpkit/error.hpp"
#include "warpkit/rng.hpp"

using namespace warpkit;
namespace fs = std::filesystem;

namespace {

const bool f64_default = [] {
    set_default_dtype(DType::F64);
    return true;
}();

Correlation random_correlation(const GridDims& grid, unsigned seed) {
    SeededRng rng(seed);
    Correlation c;
    c.grid = grid;
    for (std::size_t f = 0; f < grid.frames; ++f) {
        Tensor m = Tensor::gaussian({grid.per_frame(), grid.per_frame()}, rng);
        c.frames.push_back(softmax(m, 1));
    }
    return c;
}

}  // namespace

TEST_CASE("directional correlation is row-stochastic and peaks at the match") {
    GridDims grid{2, 3, 3};
    const std::size_t width = grid.per_frame();
    // one-hot codes, unique per cell within a frame: q_a[i] . k_b[j] peaks
    // exactly when j sits one cell after i
    Tensor qa({grid.tokens(), width}, DType::F64);
    Tensor kb({grid.tokens(), width}, DType::F64);
    for (std::size_t i = 0; i < grid.tokens(); ++i) {
        std::size_t f = i / grid.per_frame();
        std::size_t cell = i % grid.per_frame();
        qa[i * width + cell] = 4.0;
        std::size_t j = f * grid.per_frame() + (cell + 1) % grid.per_frame();
        kb[j * width + cell] = 4.0;
    }
    qa.seal();
    kb.seal();

    Correlation c = directional_correlation(qa, kb, grid);
    c.validate();
    REQUIRE(c.frames.size() == grid.frames);
    for (std::size_t f = 0; f < grid.frames; ++f) {
        for (std::size_t i = 0; i < grid.per_frame(); ++i) {
            double acc = 0.0;
            std::size_t best = 0;
            double best_v = -1.0;
            for (std::size_t j = 0; j < grid.per_frame(); ++j) {
                double v = c.frames[f](i, j);
                CHECK(v > 0.0);
                acc += v;
                if (v > best_v) {
                    best_v = v;
                    best = j;
                }
            }
            CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(best == (i + 1) % grid.per_frame());
        }
    }
}

TEST_CASE("symmetric correlation is the oriented average") {
    GridDims grid{1, 2, 2};
    Correlation ab = random_correlation(grid, 1);
    Correlation ba = random_correlation(grid, 2);
    Correlation sym = symmetric_correlation(ab, ba);
    REQUIRE(sym.frames.size() == 1);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(sym.frames[0](i, j) ==
                  doctest::Approx(0.5 * (ab.frames[0](i, j) + ba.frames[0](j, i)))
                      .epsilon(1e-14));

    Correlation wrong = random_correlation(GridDims{1, 2, 3}, 3);
    CHECK_THROWS_AS(symmetric_correlation(ab, wrong), ShapeError);
}

TEST_CASE("extract_flow equals the brute-force oracle on random maps") {
    SeededRng seeds(7);
    for (int trial = 0; trial < 100; ++trial) {
        GridDims grid{1 + static_cast<std::size_t>(trial) % 3, 3, 4};
        Correlation c = random_correlation(grid, 100 + static_cast<unsigned>(trial));
        for (FlowDirection dir : {FlowDirection::RefToGen, FlowDirection::GenToRef}) {
            FlowField fast = extract_flow(c, dir);
            FlowField slow = brute_force_match(c, dir);
            CHECK(fast.dir == dir);
            REQUIRE(fast.match.size() == slow.match.size());
            for (std::size_t i = 0; i < fast.match.size(); ++i)
                CHECK(fast.match[i] == slow.match[i]);
        }
    }
}

TEST_CASE("argmax ties resolve to the smallest index in both directions") {
    GridDims grid{1, 1, 3};
    Correlation c;
    c.grid = grid;
    // row 0 ties between columns 1 and 2; column argmax ties between rows
    c.frames.push_back(Tensor::from_values(
        {3, 3}, {0.2, 0.4, 0.4, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2}));
    FlowField rows = extract_flow(c, FlowDirection::RefToGen);
    CHECK(rows.match[0] == 1);  // first of the tied columns
    FlowField cols = extract_flow(c, FlowDirection::GenToRef);
    CHECK(cols.match[0] == 1);  // rows 1 and 2 tie at 0.5 -> row 1
}

TEST_CASE("cycle error measures the round-trip displacement") {
    GridDims grid{1, 2, 2};
    FlowField fwd;  // clip lattice -> reference cells
    fwd.grid = grid;
    fwd.dir = FlowDirection::RefToGen;
    fwd.match = {1, 0, 3, 2};
    FlowField rev;  // reference lattice -> clip cells
    rev.grid = grid;
    rev.dir = FlowDirection::GenToRef;

    // perfect inverse: zero everywhere
    rev.match = {1, 0, 3, 2};
    Tensor err = cycle_error(fwd, rev);
    REQUIRE(err.numel() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(err[i] == 0.0);

    // send everything back to cell 0: error is the distance home
    rev.match = {0, 0, 0, 0};
    err = cycle_error(fwd, rev);
    CHECK(err[0] == 0.0);                            // 0 -> 1 -> 0
    CHECK(err[1] == doctest::Approx(1.0));           // 1 -> 0 -> 0, one col off
    CHECK(err[2] == doctest::Approx(1.0));           // row distance 1
    CHECK(err[3] == doctest::Approx(std::sqrt(2.0)));

    FlowField bad = rev;
    bad.dir = FlowDirection::RefToGen;
    CHECK_THROWS_AS(cycle_error(fwd, bad), ContractError);
    CHECK_THROWS_AS(cycle_error(rev, rev), ContractError);
}

TEST_CASE("pck counts only foreground anchors within the radius") {
    GridDims grid{1, 4, 4};
    FlowField truth;
    truth.grid = grid;
    truth.dir = FlowDirection::RefToGen;
    truth.match.resize(16);
    for (std::size_t i = 0; i < 16; ++i) truth.match[i] = i;

    FlowField pred = truth;
    pred.match[0] = 1;   // one cell off
    pred.match[5] = 15;  // far off

    Tensor fg = Tensor::zeros({16}, DType::F64);
    fg[0] = 1.0;
    fg[5] = 1.0;
    fg[10] = 1.0;
    fg.seal();

    // radius alpha * max(H, W) = 0.3 * 4 = 1.2 cells
    PckResult r = pck(pred, truth, fg, 0.3);
    CHECK(r.evaluated == 3);
    CHECK(r.value == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    // tight radius: only the exact match survives
    PckResult tight = pck(pred, truth, fg, 0.05);
    CHECK(tight.value == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor empty = Tensor::zeros({16}, DType::F64);
    CHECK_THROWS_AS(pck(pred, truth, empty, 0.3), ContractError);
}

TEST_CASE("descriptor readout picks the requested trace tensors") {
    const std::size_t S = 6, n_video = 4, d = 3;
    SeededRng rng(5);
    LayerTrace tr;
    tr.q_pre = Tensor::gaussian({S, d}, rng);
    tr.k_pre = Tensor::gaussian({S, d}, rng);
    tr.q_post = Tensor::gaussian({S, d}, rng);
    tr.k_post = Tensor::gaussian({S, d}, rng);
    tr.out = Tensor::gaussian({S, d}, rng);

    auto [q0, k0] = descriptors_from_trace(tr, DescriptorKind::QkRopeFree, n_video);
    CHECK(q0.dim(0) == n_video);
    for (std::size_t i = 0; i < n_video; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(q0(i, c) == tr.q_pre(i, c));
            CHECK(k0(i, c) == tr.k_pre(i, c));
        }

    auto [q1, k1] = descriptors_from_trace(tr, DescriptorKind::Qk, n_video);
    for (std::size_t i = 0; i < n_video; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(q1(i, c) == tr.q_post(i, c));
            CHECK(k1(i, c) == tr.k_post(i, c));
        }

    auto [q2, k2] = descriptors_from_trace(tr, DescriptorKind::Hidden, n_video);
    for (std::size_t i = 0; i < n_video; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(q2(i, c) == tr.out(i, c));
            CHECK(k2(i, c) == tr.out(i, c));
        }
}

TEST_CASE("clean descriptors recover the analytic flow end to end") {
    // content-identity model, clean scene, rope-free descriptors: the sweep
    // must find a perfect match at low noise
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

    SceneParams sp;
    sp.grid = GridDims{2, 4, 4};
    sp.channels = 16;
    sp.sprite = 2;
    sp.origin_h = 0;
    sp.origin_w = 0;
    sp.step_h = 1;
    sp.step_w = 1;
    sp.subject_channels = {0, 8};
    sp.seed = 11;
    Scene scene = make_scene(sp);

    Model m = Model::content_identity(cfg);
    Schedule sched = Schedule::linear(10, 1e-4, 2e-2);
    std::vector<std::size_t> prompt(cfg.text_len, 1);
    prompt[0] = cfg.subject_id();

    SweepResult sweep = descriptor_sweep(m, sched, scene, prompt, {1}, 0.05, 3);
    REQUIRE(!sweep.rows.empty());
    CHECK(sweep.best_pck == doctest::Approx(1.0));
    bool saw_ropefree_perfect = false;
    for (const SweepRow& row : sweep.rows) {
        CHECK(row.foreground > 0);
        if (row.kind == DescriptorKind::QkRopeFree &&
            row.pck == doctest::Approx(1.0).epsilon(1e-12))
            saw_ropefree_perfect = true;
    }
    CHECK(saw_ropefree_perfect);

    fs::path dir = fs::temp_directory_path() / "warpkit_corr_test";
    fs::create_directories(dir);
    save_sweep_csv(dir / "sweep.csv", sweep);
    std::ifstream in(dir / "sweep.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "layer,kind,timestep,pck,fg_count");
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) ++lines;
    CHECK(lines == sweep.rows.size());

    FlowField flow = gt_flow(scene, FlowDirection::RefToGen);
    save_flow_csv(dir / "flow.csv", flow);
    std::ifstream fin(dir / "flow.csv");
    std::getline(fin, header);
    CHECK(header == "frame,row,col,drow,dcol");
}

TEST_CASE("correlation validation") {
    Correlation c;
    c.grid = GridDims{2, 2, 2};
    c.frames.push_back(Tensor::zeros({4, 4}, DType::F64));
    CHECK_THROWS_AS(c.validate(), ShapeError);  // frame count mismatch
    c.frames.push_back(Tensor::zeros({4, 3}, DType::F64));
    CHECK_THROWS_AS(c.validate(), ShapeError);  // non-square second frame
}
