#include <cmath>
#include <vector>

#include "doctest.h"
#include "warpkit/adaptation.hpp"
#include "warpkit/error.hpp"
#include "warpkit/mmdit.hpp"
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
    cfg.frames = 1;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    cfg.text_len = 4;
    cfg.vocab = 16;
    cfg.channels = 16;
    cfg.mlp_mult = 2;
    cfg.rope = RopeConfig{4, 2, 2, 100.0};
    cfg.validate();
    return cfg;
}

std::vector<std::size_t> tiny_prompt(const ModelConfig& cfg) {
    std::vector<std::size_t> p(cfg.text_len, 1);
    p[0] = cfg.subject_id();
    p[2] = 3;
    return p;
}

Tensor eps_of(const Model& m, const Tensor& latent,
              const std::vector<std::size_t>& prompt, std::size_t t,
              const ForwardOptions& opts = {}) {
    GradTape tape(false);
    return m.forward(tape, latent, prompt, t, opts).eps.value();
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config();
    cfg.validate();

    ModelConfig bad = cfg;
    bad.heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.rope = RopeConfig{4, 2, 4, 100.0};  // sums to 10, head_dim is 8
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.channels = 8;  // tokens are cells, widths must agree
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.text_len = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.vocab = 1;  // no room for the reserved subject slot
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("attention matches a hand-rolled reference") {
    SeededRng rng(1);
    Tensor q = Tensor::gaussian({3, 4}, rng);
    Tensor k = Tensor::gaussian({3, 4}, rng);
    Tensor v = Tensor::gaussian({3, 4}, rng);

    for (std::size_t heads : {std::size_t{1}, std::size_t{2}}) {
        Tensor got = attention(q, k, v, heads);
        const std::size_t hd = 4 / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < 3; ++i) {
                // logits over keys for query i, this head
                double logits[3];
                double mx = -1e300;
                for (std::size_t j = 0; j < 3; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c)
                        acc += q(i, off + c) * k(j, off + c);
                    logits[j] = acc * scale;
                    mx = std::max(mx, logits[j]);
                }
                double z = 0.0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    z += l;
                }
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < 3; ++j)
                        acc += logits[j] / z * v(j, off + c);
                    CHECK(got(i, off + c) == doctest::Approx(acc).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("attention key mask hides keys") {
    SeededRng rng(2);
    Tensor q = Tensor::gaussian({2, 4}, rng);
    Tensor k = Tensor::gaussian({3, 4}, rng);
    Tensor v = Tensor::gaussian({3, 4}, rng);

    std::vector<std::uint8_t> keep_last = {0, 0, 1};
    Tensor masked = attention(q, k, v, 1, &keep_last);
    // with a single visible key the output is exactly that key's value row
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(masked(i, c) == doctest::Approx(v(2, c)).epsilon(1e-12));

    std::vector<std::uint8_t> none = {0, 0, 0};
    CHECK_THROWS_AS(attention(q, k, v, 1, &none), ContractError);

    std::vector<std::uint8_t> short_mask = {1, 1};
    CHECK_THROWS_AS(attention(q, k, v, 1, &short_mask), ShapeError);
}

TEST_CASE("attention shape validation") {
    SeededRng rng(3);
    Tensor q = Tensor::gaussian({2, 4}, rng);
    Tensor k5 = Tensor::gaussian({3, 5}, rng);
    Tensor v = Tensor::gaussian({3, 4}, rng);
    CHECK_THROWS_AS(attention(q, k5, v, 1), ShapeError);
    CHECK_THROWS_AS(attention(q, Tensor::gaussian({3, 4}, rng), v, 3), ShapeError);
    Tensor r3 = Tensor::gaussian({2, 2, 2}, rng);
    CHECK_THROWS_AS(attention(r3, r3, r3, 1), ShapeError);
}

TEST_CASE("forward is deterministic and traces have the right shapes") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 5);
    SeededRng rng(4);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);

    GradTape t1(false);
    ForwardOptions opts;
    opts.capture_trace = true;
    ForwardResult r1 = m.forward(t1, latent, prompt, 3, opts);
    Tensor eps2 = eps_of(m, latent, prompt, 3);
    CHECK(bit_equal(r1.eps.value(), eps2));

    const std::size_t S = cfg.seq_len();
    REQUIRE(r1.traces.size() == cfg.layers);
    for (const LayerTrace& tr : r1.traces) {
        CHECK(tr.q_pre.dim(0) == S);
        CHECK(tr.q_pre.dim(1) == cfg.dim);
        CHECK(tr.k_pre.same_shape(tr.q_pre));
        CHECK(tr.v.same_shape(tr.q_pre));
        CHECK(tr.out.same_shape(tr.q_pre));
        REQUIRE(tr.probs.rank() == 3);
        CHECK(tr.probs.dim(0) == cfg.heads);
        CHECK(tr.probs.dim(1) == S);
        CHECK(tr.probs.dim(2) == S);
        for (std::size_t h = 0; h < cfg.heads; ++h)
            for (std::size_t i = 0; i < S; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < S; ++j)
                    acc += tr.probs[(h * S + i) * S + j];
                CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
            }
        // rotary phases move video rows but leave text rows alone
        bool video_moved = false;
        for (std::size_t c = 0; c < cfg.dim; ++c) {
            if (tr.q_post(1, c) != tr.q_pre(1, c)) video_moved = true;
            CHECK(tr.k_post(S - 1, c) == tr.k_pre(S - 1, c));
        }
        CHECK(video_moved);
    }
    // eps is per-token
    CHECK(r1.eps.value().dim(0) == cfg.video_tokens());
    CHECK(r1.eps.value().dim(1) == cfg.channels);
}

TEST_CASE("forward validates inputs and modes") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 6);
    SeededRng rng(5);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    Tensor bad_grid = Tensor::gaussian({1, 4, 5, 16}, rng);
    auto prompt = tiny_prompt(cfg);

    GradTape t(false);
    CHECK_THROWS_AS(m.forward(t, bad_grid, prompt, 0), ShapeError);
    CHECK_THROWS_AS(m.forward(t, latent, {1, 2}, 0), ShapeError);
    std::vector<std::size_t> big = prompt;
    big[1] = cfg.vocab;
    CHECK_THROWS_AS(m.forward(t, latent, big, 0), ConfigError);

    InjectionHooks hooks;
    hooks.value_override = [](std::size_t, const Tensor&) {
        return std::optional<Tensor>{};
    };
    ForwardOptions with_hooks;
    with_hooks.hooks = &hooks;
    GradTape rec(true);
    CHECK_THROWS_AS(m.forward(rec, latent, prompt, 0, with_hooks), ContractError);

    ForwardOptions train;
    train.train = true;
    CHECK_THROWS_AS(m.forward(t, latent, prompt, 0, train), ContractError);
}

TEST_CASE("value override: identity is a bit-level no-op, bad shapes throw") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 7);
    SeededRng rng(6);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);

    Tensor base = eps_of(m, latent, prompt, 2);

    InjectionHooks identity;
    identity.value_override = [](std::size_t, const Tensor& v_video) {
        return std::optional<Tensor>(v_video);
    };
    ForwardOptions opts;
    opts.hooks = &identity;
    CHECK(bit_equal(eps_of(m, latent, prompt, 2, opts), base));

    InjectionHooks bad;
    bad.value_override = [](std::size_t, const Tensor& v_video) {
        return std::optional<Tensor>(
            Tensor::zeros({v_video.dim(0) + 1, v_video.dim(1)}, v_video.dtype()));
    };
    ForwardOptions bad_opts;
    bad_opts.hooks = &bad;
    CHECK_THROWS_AS(eps_of(m, latent, prompt, 2, bad_opts), InjectionError);

    // a real replacement must change the prediction
    InjectionHooks zero;
    zero.value_override = [](std::size_t, const Tensor& v_video) {
        return std::optional<Tensor>(Tensor::zeros(v_video.shape(), v_video.dtype()));
    };
    ForwardOptions zopts;
    zopts.hooks = &zero;
    CHECK(max_abs_diff(eps_of(m, latent, prompt, 2, zopts), base) > 1e-8);
}

TEST_CASE("attention override replaces the block result") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 8);
    SeededRng rng(7);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);
    Tensor base = eps_of(m, latent, prompt, 2);

    InjectionHooks hooks;
    hooks.attention_override = [&](std::size_t, const AttentionTensors& at) {
        CHECK(at.n_video == cfg.video_tokens());
        CHECK(at.heads == cfg.heads);
        return std::optional<Tensor>(
            Tensor::zeros({at.q_rot.dim(0), at.q_rot.dim(1)}, at.q_rot.dtype()));
    };
    ForwardOptions opts;
    opts.hooks = &hooks;
    CHECK(max_abs_diff(eps_of(m, latent, prompt, 2, opts), base) > 1e-8);

    InjectionHooks bad;
    bad.attention_override = [](std::size_t, const AttentionTensors& at) {
        return std::optional<Tensor>(Tensor::zeros({1, at.q_rot.dim(1)}, at.q_rot.dtype()));
    };
    ForwardOptions bad_opts;
    bad_opts.hooks = &bad;
    CHECK_THROWS_AS(eps_of(m, latent, prompt, 2, bad_opts), InjectionError);
}

TEST_CASE("without rotary phases the model is translation equivariant") {
    ModelConfig cfg = tiny_config();
    cfg.rope_enabled = false;
    Model m = Model::content_identity(cfg);
    SeededRng rng(8);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);

    const std::size_t dr = 1, dc = 2;
    Tensor rolled({1, 4, 4, 16}, latent.dtype());
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t ch = 0; ch < 16; ++ch)
                rolled.set({0, (r + dr) % 4, (c + dc) % 4, ch},
                           latent.at({0, r, c, ch}));
    rolled.seal();

    Tensor eps_base = eps_of(m, latent, prompt, 1);
    Tensor eps_roll = eps_of(m, rolled, prompt, 1);
    double worst = 0.0;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            std::size_t src = r * 4 + c;
            std::size_t dst = ((r + dr) % 4) * 4 + (c + dc) % 4;
            for (std::size_t ch = 0; ch < 16; ++ch)
                worst = std::max(worst,
                                 std::abs(eps_roll(dst, ch) - eps_base(src, ch)));
        }
    CHECK(worst < 1e-9);

    // the rotary phases are exactly what breaks this symmetry
    ModelConfig roped = tiny_config();
    Model mr = Model::content_identity(roped);
    Tensor eb = eps_of(mr, latent, prompt, 1);
    Tensor er = eps_of(mr, rolled, prompt, 1);
    double moved = 0.0;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            std::size_t src = r * 4 + c;
            std::size_t dst = ((r + dr) % 4) * 4 + (c + dc) % 4;
            for (std::size_t ch = 0; ch < 16; ++ch)
                moved = std::max(moved, std::abs(er(dst, ch) - eb(src, ch)));
        }
    CHECK(moved > 1e-6);
}

TEST_CASE("subject token swaps in the learned embedding") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 9);
    SeededRng rng(9);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);  // subject at slot 0

    SubjectToken tok = SubjectToken::init(cfg, m.weights());
    CHECK(tok.vocab_id == cfg.subject_id());
    CHECK(tok.embedding.dim(0) == cfg.dim);

    // fresh token == embedding table row, so the swap changes nothing
    Tensor base = eps_of(m, latent, prompt, 4);
    ForwardOptions with_tok;
    with_tok.subject = &tok;
    CHECK(bit_equal(eps_of(m, latent, prompt, 4, with_tok), base));

    SubjectToken moved = tok;
    Tensor emb = moved.embedding;
    emb[0] += 0.5;
    emb.seal();
    moved.embedding = emb;
    ForwardOptions with_moved;
    with_moved.subject = &moved;
    CHECK(max_abs_diff(eps_of(m, latent, prompt, 4, with_moved), base) > 1e-8);

    // prompt without the reserved id: the token never lands anywhere
    std::vector<std::size_t> plain(cfg.text_len, 2);
    Tensor plain_base = eps_of(m, latent, plain, 4);
    CHECK(bit_equal(eps_of(m, latent, plain, 4, with_moved), plain_base));

    SubjectToken oob = tok;
    oob.vocab_id = cfg.vocab;
    ForwardOptions bad;
    bad.subject = &oob;
    CHECK_THROWS_AS(eps_of(m, latent, prompt, 4, bad), ConfigError);
}

TEST_CASE("adapters shift the adapted projection only") {
    ModelConfig cfg = tiny_config();
    Model m = Model::random_init(cfg, 10);
    SeededRng rng(10);
    Tensor latent = Tensor::gaussian({1, 4, 4, 16}, rng);
    auto prompt = tiny_prompt(cfg);
    Tensor base = eps_of(m, latent, prompt, 3);

    SeededRng arng(11);
    LoraAdapter ad = LoraAdapter::init(0, ProjSite::Key, cfg.dim, 4, arng);
    AdapterSet set;
    set.add(ad);

    // freshly initialised adapters have zero up factor: exact no-op
    ForwardOptions opts;
    opts.adapters = &set;
    CHECK(max_abs_diff(eps_of(m, latent, prompt, 3, opts), base) == 0.0);

    // push the up factor away from zero and the prediction moves
    LoraAdapter* mut = set.find(0, ProjSite::Key);
    REQUIRE(mut != nullptr);
    Tensor up = mut->up;
    for (std::size_t i = 0; i < up.numel(); ++i) up[i] = 0.05 * (1.0 + (i % 3));
    up.seal();
    mut->up = up;
    CHECK(max_abs_diff(eps_of(m, latent, prompt, 3, opts), base) > 1e-8);
}
