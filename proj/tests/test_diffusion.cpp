#include <catch2/catch_amalgamated.hpp>

#include "melatts/ar_core.hpp"
#include "melatts/diffusion.hpp"
#include "test_support.hpp"

using namespace melatts;

namespace {

template <typename T>
TtsModel<T> tiny_model(uint64_t seed = 5) {
    TtsModel<T> model;
    model.cfg = ModelConfig::tiny();
    model.tokenizer = Tokenizer::for_classes(6);
    model.cfg.vocab_size = model.tokenizer.vocab_size();
    Rng rng(seed);
    model.init(rng);
    return model;
}

template <typename T>
PsiRefs<T> random_psi(Tape<T>& t, const ModelConfig& cfg, Rng& rng) {
    PsiRefs<T> psi;
    psi.h_prev = t.constant(gaussian_matrix<T>(1, cfg.d_trans, rng));
    psi.h_cur = t.constant(gaussian_matrix<T>(1, cfg.d_trans, rng));
    psi.v = t.constant(gaussian_matrix<T>(1, cfg.d_spk, rng));
    psi.u = t.constant(gaussian_matrix<T>(1, cfg.d_utt, rng));
    return psi;
}

}  // namespace

TEST_CASE("vp_schedule endpoints, identity and domain", "[diffusion]") {
    CHECK(vp_schedule(0.0) == std::pair{1.0, 0.0});
    CHECK(vp_schedule(1.0) == std::pair{0.0, 1.0});
    const auto [a, s] = vp_schedule(0.5);
    CHECK(a == Catch::Approx(std::sqrt(0.5)).epsilon(1e-12));
    CHECK(s == Catch::Approx(std::sqrt(0.5)).epsilon(1e-12));
    for (int i = 0; i <= 1000; ++i) {
        const auto [at, st] = vp_schedule(i / 1000.0);
        REQUIRE(std::abs(at * at + st * st - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(vp_schedule(-0.01), std::invalid_argument);
    CHECK_THROWS_AS(vp_schedule(1.01), std::invalid_argument);
}

TEST_CASE("forward_diffuse endpoints are exact", "[diffusion]") {
    Rng rng(2);
    const auto x0 = gaussian_matrix<float>(8, 10, rng);
    const auto eps = gaussian_matrix<float>(8, 10, rng);
    CHECK(max_abs_diff(forward_diffuse(x0, 0.0, eps), x0) == 0.0f);
    CHECK(max_abs_diff(forward_diffuse(x0, 1.0, eps), eps) == 0.0f);
    CHECK_THROWS_AS(forward_diffuse(x0, 0.5, gaussian_matrix<float>(7, 10, rng)), std::invalid_argument);
}

TEST_CASE("forward_diffuse per-element variance matches the schedule", "[diffusion]") {
    // Monte-Carlo oracle: at fixed X0 and t, Var[X_t] over noise draws equals
    // sin^2(pi t / 2).
    const double t = 0.3;
    const auto [alpha, sigma] = vp_schedule(t);
    Rng rng(77);
    const auto x0 = gaussian_matrix<double>(1, 64, rng);
    const int draws = 100000;
    std::vector<double> sum(64, 0.0), sq(64, 0.0);
    for (int d = 0; d < draws; ++d) {
        const auto eps = gaussian_matrix<double>(1, 64, rng);
        const auto xt = forward_diffuse(x0, t, eps);
        for (int c = 0; c < 64; ++c) {
            sum[c] += xt(0, c);
            sq[c] += xt(0, c) * xt(0, c);
        }
    }
    double mean_var = 0;
    for (int c = 0; c < 64; ++c) {
        const double mean = sum[c] / draws;
        mean_var += sq[c] / draws - mean * mean;
    }
    mean_var /= 64;
    CHECK(mean_var == Catch::Approx(sigma * sigma).epsilon(0.02));
}

TEST_CASE("upsample_conditions layout and locality", "[diffusion]") {
    const int N = 8;
    Tape<double> t;
    Rng rng(4);
    auto h_prev = t.constant(gaussian_matrix<double>(1, 3, rng));
    auto h_cur = t.constant(gaussian_matrix<double>(1, 3, rng));
    auto v = t.constant(gaussian_matrix<double>(1, 2, rng));
    auto u = t.constant(gaussian_matrix<double>(1, 2, rng));
    auto m = upsample_conditions(t, h_prev, h_cur, v, u, N);
    const auto& val = t.val(m);
    REQUIRE(val.rows() == 2 * N);
    REQUIRE(val.cols() == 3 + 2 + 2);
    // rows 0..N-1 equal, rows N..2N-1 equal
    for (int r = 1; r < N; ++r)
        for (int c = 0; c < val.cols(); ++c) {
            REQUIRE(val(r, c) == val(0, c));
            REQUIRE(val(N + r, c) == val(N, c));
        }

    // changing h_cur alters only rows N..2N-1 and only the h columns
    auto h_cur2 = t.constant([&] {
        Matrix<double> hc = t.val(h_cur);
        hc(0, 1) += 1.0;
        return hc;
    }());
    auto m2 = upsample_conditions(t, h_prev, h_cur2, v, u, N);
    const auto& val2 = t.val(m2);
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < val.cols(); ++c) REQUIRE(val2(r, c) == val(r, c));
    for (int r = N; r < 2 * N; ++r) {
        REQUIRE(val2(r, 1) != val(r, 1));
        REQUIRE(val2(r, 0) == val(r, 0));
        REQUIRE(val2(r, 3) == val(r, 3));
    }
}

TEST_CASE("dit_predict shape contract and live conditions", "[diffusion]") {
    auto model = tiny_model<double>();
    const auto& cfg = model.cfg;
    Rng rng(6);

    Tape<double> t;
    auto bp = bind_params(t, model.params, true);
    auto psi = random_psi(t, cfg, rng);
    auto prev = t.constant(gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng));
    auto noisy = t.constant(gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng));

    auto out = dit_predict(t, bp, cfg, psi, prev, noisy, 0.4);
    CHECK(t.val(out).rows() == cfg.chunk_frames);       // N frames from a 2N input
    CHECK(t.val(out).cols() == cfg.n_mels);
    CHECK(t.val(out).all_finite());

    // swapping u and v content changes the output (conditions are live)
    PsiRefs<double> swapped = psi;
    std::swap(swapped.v, swapped.u);
    // v and u have different dims in general; here force same-dim swap by
    // perturbing u instead when dims differ
    if (cfg.d_spk == cfg.d_utt) {
        auto out2 = dit_predict(t, bp, cfg, swapped, prev, noisy, 0.4);
        CHECK(max_abs_diff(t.val(out2), t.val(out)) > 1e-10);
    }
    PsiRefs<double> perturbed = psi;
    perturbed.u = t.constant(gaussian_matrix<double>(1, cfg.d_utt, rng));
    auto out3 = dit_predict(t, bp, cfg, perturbed, prev, noisy, 0.4);
    CHECK(max_abs_diff(t.val(out3), t.val(out)) > 1e-10);

    // null branch is a valid call with finite output
    PsiRefs<double> null_psi = psi;
    null_psi.null_branch = true;
    auto out4 = dit_predict(t, bp, cfg, null_psi, prev, noisy, 0.4);
    CHECK(t.val(out4).all_finite());
    CHECK(max_abs_diff(t.val(out4), t.val(out)) > 1e-10);
}

TEST_CASE("diffusion_loss oracle values and gradient", "[diffusion]") {
    // pred = target + 1 everywhere on an 8x80 chunk -> sum of squares = 640
    {
        Tape<double> t;
        Matrix<double> target(8, 80);
        auto pred = t.leaf(Matrix<double>(8, 80, 1.0), true);
        auto loss = diffusion_loss(t, pred, target, 8);
        CHECK(t.val(loss)(0, 0) == Catch::Approx(640.0).epsilon(1e-12));
    }
    // identical -> zero
    {
        Tape<double> t;
        Rng rng(3);
        Matrix<double> target = gaussian_matrix<double>(8, 80, rng);
        auto loss = diffusion_loss(t, t.leaf(target, true), target, 8);
        CHECK(t.val(loss)(0, 0) == 0.0);
    }
    // masked rows contribute nothing
    {
        Tape<double> t;
        Matrix<double> target(4, 5);
        Matrix<double> pred_m(4, 5, 2.0);
        for (int c = 0; c < 5; ++c) pred_m(3, c) = 100.0;
        auto loss = diffusion_loss(t, t.leaf(pred_m, true), target, 3);
        CHECK(t.val(loss)(0, 0) == Catch::Approx(3 * 5 * 4.0));
    }
    // end-to-end gradient through the denoiser
    {
        auto model = tiny_model<double>(31);
        const auto& cfg = model.cfg;
        Rng rng(32);
        const auto prev = gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng);
        const auto noisy = gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng);
        const auto target = gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng);
        const auto hp = gaussian_matrix<double>(1, cfg.d_trans, rng);
        const auto hc = gaussian_matrix<double>(1, cfg.d_trans, rng);
        const auto v = gaussian_matrix<double>(1, cfg.d_spk, rng);
        const auto u = gaussian_matrix<double>(1, cfg.d_utt, rng);

        auto build = [&](Tape<double>& t, const ParamStore<double>& p) {
            auto bp = bind_params(t, p);
            PsiRefs<double> psi{t.constant(hp), t.constant(hc), t.constant(v), t.constant(u), false};
            auto pred = dit_predict(t, bp, cfg, psi, t.constant(prev), t.constant(noisy), 0.37);
            return std::pair{bp, diffusion_loss(t, pred, target, cfg.chunk_frames)};
        };
        auto report = testing::fd_gradient_check(
            model.params,
            [&](const ParamStore<double>& p) {
                Tape<double> t;
                return t.val(build(t, p).second)(0, 0);
            },
            [&]() {
                Tape<double> t;
                auto [bp, loss] = build(t, model.params);
                t.backward(loss);
                GradBuffer<double> g(model.params);
                g.add_from(t, bp);
                return g;
            },
            1e-5);
        INFO("denoiser gradient over " << report.count << " params");
        CHECK(report.rel_err < 1e-4);
    }
}

TEST_CASE("cfg_predict degeneracy and linear combination", "[diffusion]") {
    auto model = tiny_model<double>();
    const auto& cfg = model.cfg;
    Rng rng(8);
    Tape<double> t;
    auto bp = bind_params(t, model.params, true);
    auto psi = random_psi(t, cfg, rng);
    auto prev = t.constant(gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng));
    auto noisy = t.constant(gaussian_matrix<double>(cfg.chunk_frames, cfg.n_mels, rng));

    auto cond = dit_predict(t, bp, cfg, psi, prev, noisy, 0.5);
    PsiRefs<double> null_psi = psi;
    null_psi.null_branch = true;
    auto uncond = dit_predict(t, bp, cfg, null_psi, prev, noisy, 0.5);

    // alpha = 0 reduces to the conditional branch bit-for-bit
    auto guided0 = cfg_predict(t, bp, cfg, psi, prev, noisy, 0.5, 0.0);
    CHECK(max_abs_diff(t.val(guided0), t.val(cond)) == 0.0);

    // alpha = 0.7 equals 1.7 * cond - 0.7 * uncond
    auto guided = cfg_predict(t, bp, cfg, psi, prev, noisy, 0.5, 0.7);
    Matrix<double> expected(cfg.chunk_frames, cfg.n_mels);
    for (size_t i = 0; i < expected.size(); ++i)
        expected.data()[i] = 1.7 * t.val(cond).data()[i] - 0.7 * t.val(uncond).data()[i];
    CHECK(max_abs_diff(t.val(guided), expected) < 1e-12);

    CHECK_THROWS_AS(cfg_predict(t, bp, cfg, psi, prev, noisy, 0.5, -0.1), std::invalid_argument);
}

TEST_CASE("ddim_step identities", "[diffusion]") {
    Rng rng(12);
    const auto x0 = gaussian_matrix<double>(8, 10, rng);
    const auto eps = gaussian_matrix<double>(8, 10, rng);

    // t_next = 0 returns the clean estimate exactly
    const auto xt = forward_diffuse(x0, 0.6, eps);
    CHECK(max_abs_diff(ddim_step(xt, x0, 0.6, 0.0), x0) == 0.0);

    // with the true x0, one step lands exactly on the forward process at
    // t_next
    const auto stepped = ddim_step(xt, x0, 0.6, 0.25);
    const auto direct = forward_diffuse(x0, 0.25, eps);
    CHECK(max_abs_diff(stepped, direct) < 1e-12);

    CHECK_THROWS_AS(ddim_step(xt, x0, 0.3, 0.3), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(xt, x0, 0.3, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(xt, x0, 0.0, -0.1), std::invalid_argument);
}

TEST_CASE("ddim perfect-denoiser consistency over a full grid", "[diffusion]") {
    // with an oracle returning the true x0, any grid reproduces x0 at t=0
    Rng rng(13);
    const auto x0 = gaussian_matrix<double>(8, 10, rng);
    const auto eps = gaussian_matrix<double>(8, 10, rng);
    for (int nfe : {1, 3, 10, 25}) {
        const auto grid = SamplerConfig::uniform_grid(nfe);
        Matrix<double> x = eps;  // X at t=1
        for (size_t k = 0; k + 1 < grid.size(); ++k) x = ddim_step(x, x0, grid[k], grid[k + 1]);
        CHECK(max_abs_diff(x, x0) == 0.0);
    }
}

TEST_CASE("sampler config validation and grids", "[diffusion]") {
    SamplerConfig s;
    s.nfe = 10;
    const auto grid = s.grid();
    REQUIRE(grid.size() == 11);
    CHECK(grid.front() == 1.0);
    CHECK(grid.back() == 0.0);
    for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] < grid[i - 1]);
    s.validate();

    SamplerConfig bad;
    bad.nfe = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    SamplerConfig bad2;
    bad2.timestep_grid = {1.0, 0.5, 0.5, 0.0};
    CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}

TEST_CASE("sample_chunk determinism and nfe variants", "[diffusion]") {
    auto model = tiny_model<float>();
    const auto& cfg = model.cfg;
    Rng rng(9);
    PsiValues psi;
    psi.h_prev = gaussian_matrix<float>(1, cfg.d_trans, rng);
    psi.h_cur = gaussian_matrix<float>(1, cfg.d_trans, rng);
    psi.v = gaussian_matrix<float>(1, cfg.d_spk, rng);
    psi.u = gaussian_matrix<float>(1, cfg.d_utt, rng);
    const auto prev = gaussian_matrix<float>(cfg.chunk_frames, cfg.n_mels, rng);

    SamplerConfig sampler;
    sampler.nfe = 10;
    sampler.seed = 1234;
    const auto a = sample_chunk(model, psi, prev, sampler);
    const auto b = sample_chunk(model, psi, prev, sampler);
    CHECK(max_abs_diff(a, b) == 0.0f);  // same seed, identical output

    sampler.seed = 1235;
    const auto c = sample_chunk(model, psi, prev, sampler);
    CHECK(max_abs_diff(a, c) > 0.0f);

    SamplerConfig one;
    one.nfe = 1;
    one.seed = 1234;
    const auto d = sample_chunk(model, psi, prev, one);
    CHECK(d.rows() == cfg.chunk_frames);
    CHECK(d.cols() == cfg.n_mels);
    CHECK(d.all_finite());
    CHECK(a.all_finite());
}

TEST_CASE("condition dropout frequency lands within the binomial bound", "[diffusion]") {
    // Bernoulli(p) per chunk over many draws stays within 3 sigma of p.
    const double p = 0.2;
    const int n = 20000;
    Rng rng(55);
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += rng.bernoulli(p) ? 1 : 0;
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(static_cast<double>(hits) / n - p) < 3 * sigma);
}
