#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/ar_core.hpp"
#include "melatts/config.hpp"
#include "melatts/nn/layers.hpp"

namespace melatts {

// Time alignment module: one linear layer mapping each decoder output to
// factor stacked target-rate rows, then a reshape. Row block [factor*i,
// factor*(i+1)) depends only on h_i.
template <typename T>
typename Tape<T>::Ref tam(Tape<T>& t, const BoundParams<T>& bp, typename Tape<T>::Ref h, int factor,
                          int d_out) {
    if (factor <= 0) throw std::invalid_argument("tam: factor must be positive");
    const int rows = t.val(h).rows();
    auto projected = linear_fwd(t, bp, "tam", h);  // [T_h, factor * d_out]
    if (t.val(projected).cols() != factor * d_out) throw std::invalid_argument("tam: projection width mismatch");
    return t.reshape(projected, rows * factor, d_out);
}

template <typename T>
struct AlignLoss {
    typename Tape<T>::Ref loss;
    int skipped_rows = 0;
    int used_rows = 0;
};

// Mean over paired rows of (1 - cosine). Lengths may differ by at most
// max_mismatch rows (rate rounding at utterance edges); both sides are
// truncated to the overlap. Gradient reaches the projection and the decoder
// only; targets are plain data.
template <typename T>
AlignLoss<T> align_loss(Tape<T>& t, typename Tape<T>::Ref projected, const Matrix<T>& target,
                        int max_mismatch) {
    const int rp = t.val(projected).rows();
    const int rt = target.rows();
    if (t.val(projected).cols() != target.cols())
        throw std::invalid_argument("align_loss: feature dim mismatch");
    if (std::abs(rp - rt) > max_mismatch)
        throw std::invalid_argument("align_loss: length mismatch beyond tolerance (" + std::to_string(rp) +
                                    " vs " + std::to_string(rt) + ")");
    const int rows = std::min(rp, rt);
    if (rows < 1) throw std::invalid_argument("align_loss: empty overlap");
    auto p = rp == rows ? projected : t.slice_rows(projected, 0, rows);
    Matrix<T> tgt(rows, target.cols());
    for (int r = 0; r < rows; ++r) std::copy(target.row(r), target.row(r) + target.cols(), tgt.row(r));

    AlignLoss<T> out;
    out.loss = t.cosine_distance_rows(p, tgt, &out.skipped_rows);
    out.used_rows = rows - out.skipped_rows;
    return out;
}

// The ablation objective: same mechanics with mel frames as the target. The
// caller supplies a TAM sized for the mel rate (factor frame_rate /
// decoder_rate, d_out = n_mels).
template <typename T>
AlignLoss<T> mel_target_loss(Tape<T>& t, typename Tape<T>::Ref projected, const Matrix<T>& mel_frames,
                             int max_mismatch) {
    return align_loss(t, projected, mel_frames, max_mismatch);
}

// Frozen semantic encoder standing in for a pretrained ASR encoder:
// per-band mean removal (which discards static speaker coloration), a
// stride-4 patch projection, and a small bidirectional transformer. Weights
// come from a seeded init, persist with the checkpoint and never receive
// gradients.
struct SurrogateAsrEncoder {
    ModelConfig cfg;
    uint64_t init_seed = 0;
    ParamStore<float> params;

    void init(const ModelConfig& model_cfg, uint64_t seed) {
        cfg = model_cfg;
        init_seed = seed;
        params = ParamStore<float>();
        Rng rng(derive_seed(seed, 0xA5A5));
        const int W = cfg.asr_width;
        register_linear(params, "asr.in", cfg.asr_downsample * cfg.asr_n_mels, W, rng, /*trainable=*/false);
        for (int i = 0; i < cfg.asr_layers; ++i)
            register_transformer_block(params, "asr.blk" + std::to_string(i), W, 2, rng, /*trainable=*/false);
        register_layer_norm(params, "asr.ln_f", W, /*trainable=*/false);
        register_linear(params, "asr.out", W, cfg.d_asr, rng, /*trainable=*/false);
        // damp the random residual branches so per-row identity dominates the
        // context mixing; the probe criterion (rows linearly separable by
        // token class) is what qualifies these features as semantic
        for (int i = 0; i < cfg.asr_layers; ++i)
            for (const char* w : {".attn.o.w", ".mlp.fc2.w"}) {
                auto& m = params.at("asr.blk" + std::to_string(i) + w);
                for (size_t k = 0; k < m.size(); ++k) m.data()[k] *= 0.25f;
            }
    }

    // [T, asr_n_mels] at asr_frame_rate -> [T / downsample, d_asr].
    Matrix<float> encode(const Matrix<float>& asr_mel) const {
        const int T = asr_mel.rows();
        const int B = asr_mel.cols();
        if (T < cfg.asr_downsample) throw std::invalid_argument("surrogate_asr_encode: input too short");
        if (B != cfg.asr_n_mels) throw std::invalid_argument("surrogate_asr_encode: mel dim mismatch");

        // Per-band mean removal (discards static speaker coloration) with a
        // single utterance-level scale, so quiet bands stay quiet instead of
        // amplifying their noise floor.
        Matrix<float> normed(T, B);
        double total_var = 0;
        std::vector<double> band_mean(B);
        for (int b = 0; b < B; ++b) {
            double mean = 0;
            for (int r = 0; r < T; ++r) mean += asr_mel(r, b);
            mean /= T;
            band_mean[b] = mean;
            for (int r = 0; r < T; ++r) {
                const double d = asr_mel(r, b) - mean;
                total_var += d * d;
            }
        }
        const double inv = 1.0 / std::sqrt(total_var / (static_cast<double>(T) * B) + 1e-5);
        for (int b = 0; b < B; ++b)
            for (int r = 0; r < T; ++r)
                normed(r, b) = static_cast<float>((asr_mel(r, b) - band_mean[b]) * inv);

        const int rows = T / cfg.asr_downsample;
        Matrix<float> patches(rows, cfg.asr_downsample * B);
        for (int r = 0; r < rows; ++r)
            for (int k = 0; k < cfg.asr_downsample; ++k)
                std::copy(normed.row(r * cfg.asr_downsample + k), normed.row(r * cfg.asr_downsample + k) + B,
                          patches.row(r) + k * B);

        Tape<float> t;
        auto bp = bind_params(t, params, /*for_inference=*/true);
        auto x = t.gelu(linear_fwd(t, bp, "asr.in", t.constant(std::move(patches))));
        Matrix<float> pos = sinusoidal_position_table<float>(rows, cfg.asr_width);
        x = t.add(x, t.constant(std::move(pos)));
        for (int i = 0; i < cfg.asr_layers; ++i)
            x = transformer_block_fwd(t, bp, "asr.blk" + std::to_string(i), x, cfg.asr_heads, /*causal=*/false);
        x = layer_norm_fwd(t, bp, "asr.ln_f", x);
        auto out = linear_fwd(t, bp, "asr.out", x);
        return t.val(out);
    }
};

// Pipeline-level wrapper matching the operation name used throughout.
inline Matrix<float> surrogate_asr_encode(const SurrogateAsrEncoder& encoder, const Matrix<float>& asr_mel) {
    return encoder.encode(asr_mel);
}

}  // namespace melatts
