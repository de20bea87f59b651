#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/config.hpp"
#include "melatts/features.hpp"
#include "melatts/nn/layers.hpp"
#include "melatts/nn/params.hpp"
#include "melatts/sequence.hpp"
#include "melatts/tokenizer.hpp"

namespace melatts {

// Frozen speaker surrogate: per-band mean/std statistics of the raw log-mel,
// centered, pushed through a fixed random projection and unit-normalized.
// Deterministic and never trained.
template <typename T>
Matrix<T> speaker_embed(const Matrix<T>& mel_frames, const Matrix<T>& projection) {
    if (mel_frames.rows() < 1 || mel_frames.cols() < 1)
        throw std::invalid_argument("speaker_embed: empty input");
    const int L = mel_frames.rows(), B = mel_frames.cols();
    if (projection.cols() != 2 * B) throw std::invalid_argument("speaker_embed: projection shape mismatch");
    Matrix<T> feat(1, 2 * B);
    for (int b = 0; b < B; ++b) {
        double mean = 0;
        for (int r = 0; r < L; ++r) mean += mel_frames(r, b);
        mean /= L;
        double var = 0;
        for (int r = 0; r < L; ++r) {
            const double d = mel_frames(r, b) - mean;
            var += d * d;
        }
        feat(0, b) = static_cast<T>(mean);
        feat(0, B + b) = static_cast<T>(std::sqrt(var / L));
    }
    // center the mean and deviation blocks separately; spectral shape stays,
    // the overall level does not
    for (int block = 0; block < 2; ++block) {
        double m = 0;
        for (int b = 0; b < B; ++b) m += feat(0, block * B + b);
        m /= B;
        for (int b = 0; b < B; ++b) feat(0, block * B + b) -= static_cast<T>(m);
    }

    Matrix<T> emb;
    gemm_nt(feat, projection, emb);  // [1, d_spk]
    double norm = 0;
    for (size_t i = 0; i < emb.size(); ++i) norm += static_cast<double>(emb.data()[i]) * emb.data()[i];
    norm = std::sqrt(norm) + 1e-12;
    for (size_t i = 0; i < emb.size(); ++i) emb.data()[i] = static_cast<T>(emb.data()[i] / norm);
    return emb;
}

template <typename T>
struct DecoderOutput {
    typename Tape<T>::Ref hidden;       // [S, d_trans]
    typename Tape<T>::Ref h;            // [num_targets, d_trans]
    typename Tape<T>::Ref stop_logits;  // [num_targets, 1]
};

// The autoregressive model: token/chunk embedding front-end, causal
// pre-norm transformer, stop head, jointly trained utterance encoder, and
// the frozen speaker projection.
template <typename T>
struct TtsModel {
    ModelConfig cfg;
    Tokenizer tokenizer;
    MelNorm norm;
    bool use_utterance_embedding = true;
    AlignTarget align_target = AlignTarget::Asr;
    ParamStore<T> params;

    using Ref = typename Tape<T>::Ref;

    void init(Rng& rng) {
        cfg.validate();
        ParamStore<T>& p = params;
        const int D = cfg.d_trans;

        fill_gaussian(p.add("dec.tok_emb", cfg.vocab_size, D), rng, 0.02);
        fill_gaussian(p.add("dec.pos", cfg.max_positions, D), rng, 0.02);
        if (cfg.use_role_positions) fill_gaussian(p.add("dec.role_pos", cfg.max_positions, D), rng, 0.02);
        register_linear(p, "dec.u_proj", cfg.d_utt, D, rng);
        register_linear(p, "dec.v_proj", cfg.d_spk, D, rng);
        register_linear(p, "dec.chunk_proj", cfg.chunk_frames * cfg.n_mels, D, rng);
        for (int i = 0; i < cfg.dec_layers; ++i)
            register_transformer_block(p, "dec.blk" + std::to_string(i), D, cfg.dec_mlp_ratio, rng);
        register_layer_norm(p, "dec.ln_f", D);
        register_linear(p, "stop", D, 1, rng);

        if (use_utterance_embedding) {
            register_linear(p, "utt.in", cfg.n_mels, cfg.d_utt, rng);
            fill_gaussian(p.add("utt.pos", cfg.utt_max_frames, cfg.d_utt), rng, 0.02);
            for (int i = 0; i < cfg.utt_layers; ++i)
                register_transformer_block(p, "utt.blk" + std::to_string(i), cfg.d_utt, cfg.dec_mlp_ratio, rng);
            register_layer_norm(p, "utt.ln_f", cfg.d_utt);
        } else {
            fill_gaussian(p.add("utt.const_u", 1, cfg.d_utt), rng, 0.02);
        }

        register_dit(rng);
        register_tam(rng);

        fill_gaussian(p.add("spkenc.proj", cfg.d_spk, 2 * cfg.n_mels, /*trainable=*/false), rng,
                      1.0 / std::sqrt(2.0 * cfg.n_mels));
    }

    // ---- front-end pieces ----

    // [N, n_mels] -> [1, d_trans] via the learned strided projection over the
    // whole chunk (stride-N convolution, one output step).
    Ref downsample_chunk(Tape<T>& t, const BoundParams<T>& bp, Ref chunk_frames_2d) const {
        const auto& v = t.val(chunk_frames_2d);
        if (v.rows() != cfg.chunk_frames || v.cols() != cfg.n_mels)
            throw std::invalid_argument("downsample_chunk: expected [" + std::to_string(cfg.chunk_frames) + ", " +
                                        std::to_string(cfg.n_mels) + "] frames");
        auto flat = t.reshape(chunk_frames_2d, 1, cfg.chunk_frames * cfg.n_mels);
        return linear_fwd(t, bp, "dec.chunk_proj", flat);
    }

    // Mean-pooled transformer encoding of a (cropped) normalized mel
    // segment; jointly optimized with the decoder.
    Ref encode_utterance(Tape<T>& t, const BoundParams<T>& bp, const Matrix<T>& segment) const {
        if (!use_utterance_embedding)
            throw std::logic_error("encode_utterance: model built with constant utterance embedding");
        if (segment.rows() < 1) throw std::invalid_argument("encode_utterance: empty segment");
        if (segment.rows() > cfg.utt_max_frames)
            throw std::invalid_argument("encode_utterance: segment exceeds max frames");
        if (segment.cols() != cfg.n_mels) throw std::invalid_argument("encode_utterance: mel dim mismatch");
        const int L = segment.rows();
        auto x = linear_fwd(t, bp, "utt.in", t.constant(segment));
        x = t.add(x, t.slice_rows(bp["utt.pos"], 0, L));
        for (int i = 0; i < cfg.utt_layers; ++i)
            x = transformer_block_fwd(t, bp, "utt.blk" + std::to_string(i), x, cfg.utt_heads, /*causal=*/false);
        x = layer_norm_fwd(t, bp, "utt.ln_f", x);
        return t.mean_rows(x);
    }

    Ref utterance_embedding_ref(Tape<T>& t, const BoundParams<T>& bp, const Matrix<T>& segment) const {
        return use_utterance_embedding ? encode_utterance(t, bp, segment) : bp["utt.const_u"];
    }

    // ---- decoder ----

    // Teacher-forced pass over a position-typed sequence. chunks[i] supplies
    // the normalized frames for chunk elements with chunk == i. h is read at
    // the position immediately preceding each target chunk.
    DecoderOutput<T> decoder_forward(Tape<T>& t, const BoundParams<T>& bp, const DecoderSequence& seq,
                                     Ref u_embedding, const Matrix<T>& v,
                                     const std::vector<Matrix<T>>& chunks) const {
        seq.validate();
        if (static_cast<int>(chunks.size()) != seq.num_chunks)
            throw std::invalid_argument("decoder_forward: chunk array does not match sequence");
        const int S = seq.length();
        if (S > cfg.max_positions) throw std::invalid_argument("decoder_forward: sequence exceeds max positions");

        std::vector<Ref> pieces;
        pieces.push_back(linear_fwd(t, bp, "dec.u_proj", u_embedding));
        pieces.push_back(linear_fwd(t, bp, "dec.v_proj", t.constant(v)));

        // Group contiguous runs of token-like and chunk elements.
        int i = 2;
        while (i < S) {
            const ElemKind k = seq.elems[i].kind;
            if (k == ElemKind::Chunk) {
                int j = i;
                while (j < S && seq.elems[j].kind == ElemKind::Chunk) ++j;
                Matrix<T> flat(j - i, cfg.chunk_frames * cfg.n_mels);
                for (int r = i; r < j; ++r) {
                    const Matrix<T>& c = chunks[seq.elems[r].chunk];
                    if (c.rows() != cfg.chunk_frames || c.cols() != cfg.n_mels)
                        throw std::invalid_argument("decoder_forward: chunk frame shape mismatch");
                    std::copy(c.data(), c.data() + c.size(), flat.row(r - i));
                }
                pieces.push_back(linear_fwd(t, bp, "dec.chunk_proj", t.constant(std::move(flat))));
                i = j;
            } else {
                int j = i;
                std::vector<int> ids;
                while (j < S && seq.elems[j].kind != ElemKind::Chunk) {
                    const int tok = seq.elems[j].token;
                    if (tok < 0 || tok >= cfg.vocab_size)
                        throw std::invalid_argument("decoder_forward: token id out of range");
                    ids.push_back(tok);
                    ++j;
                }
                pieces.push_back(t.gather_rows(bp["dec.tok_emb"], ids));
                i = j;
            }
        }

        auto x = t.concat_rows(pieces);
        x = t.add(x, t.slice_rows(bp["dec.pos"], 0, S));
        if (cfg.use_role_positions) x = t.add(x, t.gather_rows(bp["dec.role_pos"], element_roles(seq)));
        for (int l = 0; l < cfg.dec_layers; ++l)
            x = transformer_block_fwd(t, bp, "dec.blk" + std::to_string(l), x, cfg.dec_heads, /*causal=*/true);
        auto hidden = layer_norm_fwd(t, bp, "dec.ln_f", x);

        std::vector<int> read_pos;
        read_pos.reserve(seq.targets.size());
        for (const auto& tgt : seq.targets) read_pos.push_back(tgt.h_pos);
        DecoderOutput<T> out;
        out.hidden = hidden;
        out.h = read_pos.empty() ? t.constant(Matrix<T>(0, cfg.d_trans)) : t.gather_rows(hidden, read_pos);
        out.stop_logits = read_pos.empty() ? t.constant(Matrix<T>(0, 1)) : linear_fwd(t, bp, "stop", out.h);
        return out;
    }

    // Role index per element: text token i and the position whose hidden
    // state conditions chunk i share index i; other elements share index 0.
    std::vector<int> element_roles(const DecoderSequence& seq) const {
        std::vector<int> roles(seq.elems.size(), 0);
        int text_ord = 0, target_ord = 0;
        for (size_t i = 0; i < seq.elems.size(); ++i) {
            const auto& e = seq.elems[i];
            int role = 0;
            if (e.kind == ElemKind::Text)
                role = ++text_ord;
            else if (e.kind == ElemKind::TurnOfSpeech)
                role = 1;  // conditions the first chunk
            else if (e.kind == ElemKind::Chunk && !e.prompt)
                role = ++target_ord + 1;  // next chunk to be spoken
            roles[i] = std::min(role, cfg.max_positions - 1);
        }
        return roles;
    }

    // ---- stop prediction ----

    Ref stop_loss(Tape<T>& t, Ref stop_logits, const std::vector<int>& labels) const {
        if (t.val(stop_logits).rows() != static_cast<int>(labels.size()))
            throw std::invalid_argument("stop_loss: label count mismatch");
        return t.bce_with_logits_mean(stop_logits, labels);
    }

    // Scalar inference helper over one hidden row.
    double stop_probability(const Matrix<T>& h_row) const {
        if (h_row.rows() != 1 || h_row.cols() != cfg.d_trans)
            throw std::invalid_argument("stop_probability: expected [1, d_trans]");
        if (!h_row.all_finite()) throw std::invalid_argument("stop_probability: non-finite input");
        const Matrix<T>& w = params.at("stop.w");
        const Matrix<T>& b = params.at("stop.b");
        double z = b(0, 0);
        for (int c = 0; c < cfg.d_trans; ++c) z += static_cast<double>(w(0, c)) * h_row(0, c);
        return 1.0 / (1.0 + std::exp(-z));
    }

    Matrix<T> speaker_embedding(const Matrix<float>& raw_mel) const {
        return speaker_embed(raw_mel.template cast<T>(), params.at("spkenc.proj"));
    }

private:
    void register_dit(Rng& rng) {
        ParamStore<T>& p = params;
        const int W = cfg.dit_width;
        const int Dc = cfg.d_trans + cfg.d_spk + cfg.d_utt;
        register_linear(p, "dit.in_proj", cfg.n_mels, W, rng);
        register_linear(p, "dit.cond_proj", Dc, W, rng);
        register_linear(p, "dit.pooled_proj", Dc, W, rng);
        register_linear(p, "dit.t_mlp.fc1", cfg.t_feat_dim, W, rng);
        register_linear(p, "dit.t_mlp.fc2", W, W, rng);
        fill_gaussian(p.add("dit.pos", 2 * cfg.chunk_frames, W), rng, 0.02);
        for (int i = 0; i < cfg.dit_layers; ++i) {
            const std::string blk = "dit.blk" + std::to_string(i);
            register_layer_norm(p, blk + ".ln1", W);
            register_attention(p, blk + ".attn", W, rng);
            register_layer_norm(p, blk + ".ln2", W);
            register_mlp(p, blk + ".mlp", W, W * cfg.dit_mlp_ratio, rng);
            register_linear(p, blk + ".mod", W, 6 * W, rng, true, /*scale=*/0.0);  // identity at init
        }
        register_layer_norm(p, "dit.ln_f", W);
        register_linear(p, "dit.final_mod", W, 2 * W, rng, true, /*scale=*/0.0);
        register_linear(p, "dit.out_proj", W, cfg.n_mels, rng, true, /*scale=*/0.0);
        fill_gaussian(p.add("dit.null_h", 1, cfg.d_trans), rng, 0.02);
        fill_gaussian(p.add("dit.null_v", 1, cfg.d_spk), rng, 0.02);
        fill_gaussian(p.add("dit.null_u", 1, cfg.d_utt), rng, 0.02);
        fill_gaussian(p.add("dit.start_h", 1, cfg.d_trans), rng, 0.02);
        fill_gaussian(p.add("dit.start_chunk", cfg.chunk_frames, cfg.n_mels), rng, 0.02);
    }

    void register_tam(Rng& rng) {
        if (align_target == AlignTarget::None) return;
        const auto dims = tam_dims();
        register_linear(params, "tam", cfg.d_trans, dims.factor * dims.d_out, rng);
    }

public:
    struct TamDims {
        int factor = 0;
        int d_out = 0;
    };

    // Upsample factor closing the rate gap between the decoder (frame_rate /
    // chunk_frames) and the alignment target; must be an exact integer.
    TamDims tam_dims() const {
        TamDims d;
        double target_rate = 0.0;
        if (align_target == AlignTarget::Asr) {
            target_rate = cfg.asr_frame_rate / cfg.asr_downsample;
            d.d_out = cfg.d_asr;
        } else if (align_target == AlignTarget::Mel) {
            target_rate = cfg.frame_rate;
            d.d_out = cfg.n_mels;
        } else {
            throw std::logic_error("tam_dims: alignment disabled");
        }
        const double ratio = target_rate / cfg.decoder_rate();
        d.factor = static_cast<int>(std::lround(ratio));
        if (d.factor < 1 || std::abs(ratio - d.factor) > 1e-9)
            throw std::invalid_argument("tam_dims: target rate is not an integer multiple of the decoder rate");
        return d;
    }
};

}  // namespace melatts
