#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "melatts/ar_core.hpp"
#include "melatts/config.hpp"
#include "melatts/core/rng.hpp"

namespace melatts {

// Variance-preserving schedule: alpha = cos(pi*t/2), sigma = sin(pi*t/2).
// Endpoints are returned exactly so the process endpoints hold bit-for-bit.
inline std::pair<double, double> vp_schedule(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("vp_schedule: t must lie in [0, 1]");
    if (t == 0.0) return {1.0, 0.0};
    if (t == 1.0) return {0.0, 1.0};
    return {std::cos(M_PI * t / 2.0), std::sin(M_PI * t / 2.0)};
}

// X_t = alpha_t * X_0 + sigma_t * eps, elementwise; eps is caller-supplied.
template <typename T>
Matrix<T> forward_diffuse(const Matrix<T>& x0, double t, const Matrix<T>& eps) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: shape mismatch");
    const auto [alpha, sigma] = vp_schedule(t);
    Matrix<T> out(x0.rows(), x0.cols());
    for (size_t i = 0; i < out.size(); ++i)
        out.data()[i] = static_cast<T>(alpha) * x0.data()[i] + static_cast<T>(sigma) * eps.data()[i];
    return out;
}

// Deterministic update: recover eps_hat from the current state and the clean
// estimate, then re-diffuse to t_next. At t_next = 0 this returns the clean
// estimate exactly.
template <typename T>
Matrix<T> ddim_step(const Matrix<T>& x_t, const Matrix<T>& x0_hat, double t, double t_next) {
    if (!x_t.same_shape(x0_hat)) throw std::invalid_argument("ddim_step: shape mismatch");
    if (!(t > t_next)) throw std::invalid_argument("ddim_step: requires t > t_next");
    const auto [alpha_t, sigma_t] = vp_schedule(t);
    const auto [alpha_n, sigma_n] = vp_schedule(t_next);
    if (sigma_t == 0.0) throw std::invalid_argument("ddim_step: sigma_t is zero");
    Matrix<T> out(x_t.rows(), x_t.cols());
    for (size_t i = 0; i < out.size(); ++i) {
        const T eps_hat = (x_t.data()[i] - static_cast<T>(alpha_t) * x0_hat.data()[i]) / static_cast<T>(sigma_t);
        out.data()[i] = static_cast<T>(alpha_n) * x0_hat.data()[i] + static_cast<T>(sigma_n) * eps_hat;
    }
    return out;
}

struct SamplerConfig {
    int nfe = 10;
    double cfg_alpha = 0.7;
    uint64_t seed = 0;
    std::vector<double> timestep_grid;  // strictly decreasing from 1 to 0

    static std::vector<double> uniform_grid(int nfe) {
        std::vector<double> grid(nfe + 1);
        for (int k = 0; k <= nfe; ++k) grid[k] = 1.0 - static_cast<double>(k) / nfe;
        grid.front() = 1.0;
        grid.back() = 0.0;
        return grid;
    }

    std::vector<double> grid() const { return timestep_grid.empty() ? uniform_grid(nfe) : timestep_grid; }

    void validate() const {
        if (nfe < 1) throw std::invalid_argument("SamplerConfig: nfe must be >= 1");
        if (cfg_alpha < 0) throw std::invalid_argument("SamplerConfig: cfg_alpha must be >= 0");
        const auto g = grid();
        if (g.size() < 2 || g.front() != 1.0 || g.back() != 0.0)
            throw std::invalid_argument("SamplerConfig: grid must run from 1 to 0");
        for (size_t i = 1; i < g.size(); ++i)
            if (!(g[i] < g[i - 1])) throw std::invalid_argument("SamplerConfig: grid must be strictly decreasing");
    }

    json to_json() const { return json{{"nfe", nfe}, {"cfg_alpha", cfg_alpha}}; }
    static SamplerConfig from_json(const json& j) {
        SamplerConfig s;
        s.nfe = j.at("nfe");
        s.cfg_alpha = j.at("cfg_alpha");
        return s;
    }
};

// Per-chunk condition set: the adjacent pair of decoder outputs, the speaker
// embedding and the utterance embedding. The null branch swaps in the
// learned null embeddings (the previous clean chunk stays).
template <typename T>
struct PsiRefs {
    typename Tape<T>::Ref h_prev;
    typename Tape<T>::Ref h_cur;
    typename Tape<T>::Ref v;
    typename Tape<T>::Ref u;
    bool null_branch = false;
};

// h_prev over the first N frames, h_cur over the last N, v and u broadcast
// to all 2N; concatenated per frame.
template <typename T>
typename Tape<T>::Ref upsample_conditions(Tape<T>& t, typename Tape<T>::Ref h_prev,
                                          typename Tape<T>::Ref h_cur, typename Tape<T>::Ref v,
                                          typename Tape<T>::Ref u, int chunk_frames) {
    auto h_block = t.concat_rows({t.tile_rows(h_prev, chunk_frames), t.tile_rows(h_cur, chunk_frames)});
    auto v_block = t.tile_rows(v, 2 * chunk_frames);
    auto u_block = t.tile_rows(u, 2 * chunk_frames);
    return t.concat_cols({h_block, v_block, u_block});
}

template <typename T>
typename Tape<T>::Ref modulate(Tape<T>& t, typename Tape<T>::Ref x, typename Tape<T>::Ref shift,
                               typename Tape<T>::Ref scale) {
    return t.add_rowvec(t.mul_rowvec(x, t.add_scalar(scale, T(1))), shift);
}

// Denoiser forward: transformer over [prev_clean || noisy] (2N frames) with
// per-frame condition addition plus pooled adaptive-layer-norm modulation.
// Only the trailing N frames are returned; the prefix output is discarded.
template <typename T>
typename Tape<T>::Ref dit_predict(Tape<T>& t, const BoundParams<T>& bp, const ModelConfig& cfg,
                                  const PsiRefs<T>& psi, typename Tape<T>::Ref prev_chunk,
                                  typename Tape<T>::Ref noisy_chunk, double time) {
    const int N = cfg.chunk_frames;
    const int W = cfg.dit_width;
    if (!(time >= 0.0 && time <= 1.0)) throw std::invalid_argument("dit_predict: t must lie in [0, 1]");
    const auto& pv = t.val(prev_chunk);
    const auto& nv = t.val(noisy_chunk);
    if (pv.rows() != N || pv.cols() != cfg.n_mels || nv.rows() != N || nv.cols() != cfg.n_mels)
        throw std::invalid_argument("dit_predict: chunk shape mismatch");
    if (!pv.all_finite() || !nv.all_finite()) throw std::invalid_argument("dit_predict: non-finite input");

    const auto h_prev = psi.null_branch ? bp["dit.null_h"] : psi.h_prev;
    const auto h_cur = psi.null_branch ? bp["dit.null_h"] : psi.h_cur;
    const auto v = psi.null_branch ? bp["dit.null_v"] : psi.v;
    const auto u = psi.null_branch ? bp["dit.null_u"] : psi.u;
    auto cond = upsample_conditions(t, h_prev, h_cur, v, u, N);

    auto frames = t.concat_rows({prev_chunk, noisy_chunk});
    auto x = linear_fwd(t, bp, "dit.in_proj", frames);
    x = t.add(x, linear_fwd(t, bp, "dit.cond_proj", cond));
    x = t.add(x, t.slice_rows(bp["dit.pos"], 0, 2 * N));

    auto t_feat = t.constant(sinusoidal_features<T>(time, cfg.t_feat_dim));
    auto t_emb = linear_fwd(t, bp, "dit.t_mlp.fc2", t.silu(linear_fwd(t, bp, "dit.t_mlp.fc1", t_feat)));
    auto cvec = t.silu(t.add(linear_fwd(t, bp, "dit.pooled_proj", t.mean_rows(cond)), t_emb));

    for (int i = 0; i < cfg.dit_layers; ++i) {
        const std::string blk = "dit.blk" + std::to_string(i);
        auto mod = linear_fwd(t, bp, blk + ".mod", cvec);
        auto shift1 = t.slice_cols(mod, 0, W);
        auto scale1 = t.slice_cols(mod, W, 2 * W);
        auto gate1 = t.slice_cols(mod, 2 * W, 3 * W);
        auto shift2 = t.slice_cols(mod, 3 * W, 4 * W);
        auto scale2 = t.slice_cols(mod, 4 * W, 5 * W);
        auto gate2 = t.slice_cols(mod, 5 * W, 6 * W);
        auto a = attention_fwd(t, bp, blk + ".attn",
                               modulate(t, layer_norm_fwd(t, bp, blk + ".ln1", x), shift1, scale1),
                               cfg.dit_heads, /*causal=*/false);
        x = t.add(x, t.mul_rowvec(a, gate1));
        auto m = mlp_fwd(t, bp, blk + ".mlp",
                         modulate(t, layer_norm_fwd(t, bp, blk + ".ln2", x), shift2, scale2));
        x = t.add(x, t.mul_rowvec(m, gate2));
    }
    auto fmod = linear_fwd(t, bp, "dit.final_mod", cvec);
    auto y = modulate(t, layer_norm_fwd(t, bp, "dit.ln_f", x), t.slice_cols(fmod, 0, W),
                      t.slice_cols(fmod, W, 2 * W));
    auto out = linear_fwd(t, bp, "dit.out_proj", y);
    return t.slice_rows(out, N, 2 * N);
}

// Sum of squared error over valid (unpadded) frames of one chunk.
template <typename T>
typename Tape<T>::Ref diffusion_loss(Tape<T>& t, typename Tape<T>::Ref pred, const Matrix<T>& target,
                                     int valid_frames) {
    return t.squared_error_sum(pred, target, valid_frames);
}

// One chunk of a batched denoiser call.
template <typename T>
struct DitBatchItem {
    PsiRefs<T> psi;
    typename Tape<T>::Ref prev_chunk;  // [N, n_mels]
    typename Tape<T>::Ref noisy_chunk; // [N, n_mels]
    double time = 0.0;
};

// All chunks of one utterance denoised in a single forward pass: the 2N-row
// segments share the sequence under a block-diagonal attention mask, so the
// result matches per-chunk dit_predict up to float reduction order while the
// projections run as one matrix product. Returns the trailing N rows of each
// segment, stacked [C*N, n_mels] in item order.
template <typename T>
typename Tape<T>::Ref dit_predict_batch(Tape<T>& t, const BoundParams<T>& bp, const ModelConfig& cfg,
                                        const std::vector<DitBatchItem<T>>& items) {
    if (items.empty()) throw std::invalid_argument("dit_predict_batch: no items");
    const int N = cfg.chunk_frames;
    const int W = cfg.dit_width;
    const int C = static_cast<int>(items.size());

    // per-frame condition matrix for all chunks
    std::vector<typename Tape<T>::Ref> h_parts, frame_parts, tvec_parts, pooled_parts;
    h_parts.reserve(2 * C);
    frame_parts.reserve(2 * C);
    for (const auto& item : items) {
        if (!(item.time >= 0.0 && item.time <= 1.0))
            throw std::invalid_argument("dit_predict_batch: t must lie in [0, 1]");
        const auto h_prev = item.psi.null_branch ? bp["dit.null_h"] : item.psi.h_prev;
        const auto h_cur = item.psi.null_branch ? bp["dit.null_h"] : item.psi.h_cur;
        h_parts.push_back(t.tile_rows(h_prev, N));
        h_parts.push_back(t.tile_rows(h_cur, N));
        frame_parts.push_back(item.prev_chunk);
        frame_parts.push_back(item.noisy_chunk);
        tvec_parts.push_back(t.constant(sinusoidal_features<T>(item.time, cfg.t_feat_dim)));
    }
    std::vector<typename Tape<T>::Ref> vu_parts;
    for (const auto& item : items) {
        const auto v = item.psi.null_branch ? bp["dit.null_v"] : item.psi.v;
        const auto u = item.psi.null_branch ? bp["dit.null_u"] : item.psi.u;
        vu_parts.push_back(t.tile_rows(t.concat_cols({v, u}), 2 * N));
    }
    auto cond = t.concat_cols({t.concat_rows(h_parts), t.concat_rows(vu_parts)});  // [C*2N, Dc]

    auto frames = t.concat_rows(frame_parts);  // [C*2N, n_mels]
    auto x = linear_fwd(t, bp, "dit.in_proj", frames);
    x = t.add(x, linear_fwd(t, bp, "dit.cond_proj", cond));
    std::vector<int> pos_idx(static_cast<size_t>(C) * 2 * N);
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < 2 * N; ++r) pos_idx[c * 2 * N + r] = r;
    x = t.add(x, t.gather_rows(bp["dit.pos"], pos_idx));

    // pooled conditioning per chunk: [C, W]
    for (int c = 0; c < C; ++c)
        pooled_parts.push_back(t.mean_rows(t.slice_rows(cond, c * 2 * N, (c + 1) * 2 * N)));
    auto t_emb = linear_fwd(t, bp, "dit.t_mlp.fc2",
                            t.silu(linear_fwd(t, bp, "dit.t_mlp.fc1", t.concat_rows(tvec_parts))));
    auto cvec = t.silu(t.add(linear_fwd(t, bp, "dit.pooled_proj", t.concat_rows(pooled_parts)), t_emb));

    std::vector<int> expand_idx(static_cast<size_t>(C) * 2 * N);
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < 2 * N; ++r) expand_idx[c * 2 * N + r] = c;
    auto expand = [&](typename Tape<T>::Ref rows) { return t.gather_rows(rows, expand_idx); };
    auto modulate_full = [&](typename Tape<T>::Ref y, typename Tape<T>::Ref shift, typename Tape<T>::Ref scale) {
        return t.add(t.mul(y, t.add_scalar(expand(scale), T(1))), expand(shift));
    };

    const Matrix<T> mask = block_diagonal_mask<T>(C, 2 * N);
    for (int i = 0; i < cfg.dit_layers; ++i) {
        const std::string blk = "dit.blk" + std::to_string(i);
        auto mod = linear_fwd(t, bp, blk + ".mod", cvec);  // [C, 6W]
        auto shift1 = t.slice_cols(mod, 0, W);
        auto scale1 = t.slice_cols(mod, W, 2 * W);
        auto gate1 = t.slice_cols(mod, 2 * W, 3 * W);
        auto shift2 = t.slice_cols(mod, 3 * W, 4 * W);
        auto scale2 = t.slice_cols(mod, 4 * W, 5 * W);
        auto gate2 = t.slice_cols(mod, 5 * W, 6 * W);
        auto a = attention_fwd_masked(t, bp, blk + ".attn",
                                      modulate_full(layer_norm_fwd(t, bp, blk + ".ln1", x), shift1, scale1),
                                      cfg.dit_heads, &mask);
        x = t.add(x, t.mul(a, expand(gate1)));
        auto m = mlp_fwd(t, bp, blk + ".mlp",
                         modulate_full(layer_norm_fwd(t, bp, blk + ".ln2", x), shift2, scale2));
        x = t.add(x, t.mul(m, expand(gate2)));
    }
    auto fmod = linear_fwd(t, bp, "dit.final_mod", cvec);  // [C, 2W]
    auto y = modulate_full(layer_norm_fwd(t, bp, "dit.ln_f", x), t.slice_cols(fmod, 0, W),
                           t.slice_cols(fmod, W, 2 * W));
    auto out = linear_fwd(t, bp, "dit.out_proj", y);  // [C*2N, n_mels]

    std::vector<int> tail_idx(static_cast<size_t>(C) * N);
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < N; ++r) tail_idx[c * N + r] = c * 2 * N + N + r;
    return t.gather_rows(out, tail_idx);
}

// (1 + alpha) * conditional - alpha * unconditional; both branches share the
// same prev/noisy/t.
template <typename T>
typename Tape<T>::Ref cfg_predict(Tape<T>& t, const BoundParams<T>& bp, const ModelConfig& cfg,
                                  const PsiRefs<T>& psi, typename Tape<T>::Ref prev_chunk,
                                  typename Tape<T>::Ref noisy_chunk, double time, double cfg_alpha) {
    if (cfg_alpha < 0) throw std::invalid_argument("cfg_predict: cfg_alpha must be >= 0");
    auto cond = dit_predict(t, bp, cfg, psi, prev_chunk, noisy_chunk, time);
    PsiRefs<T> null_psi = psi;
    null_psi.null_branch = true;
    auto uncond = dit_predict(t, bp, cfg, null_psi, prev_chunk, noisy_chunk, time);
    return t.add(t.scale(cond, T(1) + static_cast<T>(cfg_alpha)), t.scale(uncond, -static_cast<T>(cfg_alpha)));
}

// Condition values for sampling, as plain matrices (the sampler owns its own
// inference tapes).
struct PsiValues {
    Matrix<float> h_prev;  // [1, d_trans]
    Matrix<float> h_cur;   // [1, d_trans]
    Matrix<float> v;       // [1, d_spk]
    Matrix<float> u;       // [1, d_utt]
};

// Seeded DDIM sampling on a caller-owned tape with already-bound parameters:
// start from standard normal at t = 1, then alternate guided prediction and
// the deterministic update along the grid. The conditional and null branches
// run as one two-item batched call. Nodes created here are dropped before
// returning. Bit-reproducible given (seed, parameters, inputs).
inline Matrix<float> sample_chunk_on_tape(Tape<float>& t, const BoundParams<float>& bp,
                                          const ModelConfig& cfg, const PsiValues& psi,
                                          const Matrix<float>& prev_chunk, const SamplerConfig& sampler) {
    sampler.validate();
    Rng rng(sampler.seed);
    Matrix<float> x = gaussian_matrix<float>(cfg.chunk_frames, cfg.n_mels, rng);
    const auto grid = sampler.grid();
    const float alpha = static_cast<float>(sampler.cfg_alpha);
    const int N = cfg.chunk_frames;

    const size_t mark = t.num_nodes();
    auto prev_ref = t.constant(prev_chunk);
    PsiRefs<float> refs;
    refs.h_prev = t.constant(psi.h_prev);
    refs.h_cur = t.constant(psi.h_cur);
    refs.v = t.constant(psi.v);
    refs.u = t.constant(psi.u);
    PsiRefs<float> null_refs = refs;
    null_refs.null_branch = true;

    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const size_t step_mark = t.num_nodes();
        auto noisy_ref = t.constant(x);
        std::vector<DitBatchItem<float>> items(2);
        items[0] = DitBatchItem<float>{refs, prev_ref, noisy_ref, grid[k]};
        items[1] = DitBatchItem<float>{null_refs, prev_ref, noisy_ref, grid[k]};
        const auto& both = t.val(dit_predict_batch(t, bp, cfg, items));  // [2N, n_mels]
        Matrix<float> guided = Matrix<float>::uninit(N, cfg.n_mels);
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < cfg.n_mels; ++c)
                guided(r, c) = (1.0f + alpha) * both(r, c) - alpha * both(N + r, c);
        x = ddim_step(x, guided, grid[k], grid[k + 1]);
        t.truncate(step_mark);
    }
    t.truncate(mark);
    return x;
}

inline Matrix<float> sample_chunk(const TtsModel<float>& model, const PsiValues& psi,
                                  const Matrix<float>& prev_chunk, const SamplerConfig& sampler) {
    Tape<float> t;
    auto bp = bind_params(t, model.params, /*for_inference=*/true);
    return sample_chunk_on_tape(t, bp, model.cfg, psi, prev_chunk, sampler);
}

}  // namespace melatts
