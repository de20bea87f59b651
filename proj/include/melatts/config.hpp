#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "melatts/features.hpp"

namespace melatts {

// Alignment objective selector: the frozen semantic encoder, raw mel frames
// (the ablation), or disabled.
enum class AlignTarget { None, Asr, Mel };

inline std::string to_string(AlignTarget t) {
    switch (t) {
        case AlignTarget::None: return "none";
        case AlignTarget::Asr: return "asr";
        case AlignTarget::Mel: return "mel";
    }
    throw std::logic_error("bad AlignTarget");
}
inline AlignTarget align_target_from_string(const std::string& s) {
    if (s == "none") return AlignTarget::None;
    if (s == "asr") return AlignTarget::Asr;
    if (s == "mel") return AlignTarget::Mel;
    throw std::invalid_argument("align_target must be one of none|asr|mel, got " + s);
}

// Dimensions of every trainable and frozen network. The defaults are the
// desk-scale configuration; tiny() is the instance used by gradient checks.
struct ModelConfig {
    // frame geometry
    int n_mels = 80;
    int chunk_frames = 8;  // N
    double frame_rate = 50.0;

    // autoregressive decoder
    int d_trans = 128;
    int dec_layers = 4;
    int dec_heads = 4;
    int dec_mlp_ratio = 4;
    int max_positions = 192;
    // besides absolute positions, text token i and the position conditioning
    // chunk i share a learned role embedding, which keeps content routing and
    // stop detection layout-independent
    bool use_role_positions = true;

    // denoiser
    int dit_width = 128;
    int dit_layers = 4;
    int dit_heads = 4;
    int dit_mlp_ratio = 4;
    int t_feat_dim = 64;

    // utterance encoder
    int d_utt = 64;
    int utt_layers = 2;
    int utt_heads = 4;
    int utt_max_frames = 128;

    // frozen speaker surrogate
    int d_spk = 32;

    // frozen semantic encoder + alignment
    int asr_n_mels = 128;
    double asr_frame_rate = 100.0;  // pre-downsample
    int asr_downsample = 4;
    int asr_width = 64;
    int asr_layers = 2;
    int asr_heads = 4;
    int d_asr = 64;

    int vocab_size = 0;  // filled from the tokenizer

    double decoder_rate() const { return frame_rate / chunk_frames; }

    void validate() const {
        if (n_mels < 1 || chunk_frames < 1) throw std::invalid_argument("ModelConfig: bad frame geometry");
        if (d_trans % dec_heads != 0 || dit_width % dit_heads != 0 || d_utt % utt_heads != 0 ||
            asr_width % asr_heads != 0)
            throw std::invalid_argument("ModelConfig: width not divisible by heads");
        if (vocab_size <= 0) throw std::invalid_argument("ModelConfig: vocab_size unset");
    }

    static ModelConfig tiny() {
        ModelConfig c;
        c.n_mels = 6;
        c.chunk_frames = 4;
        c.frame_rate = 50.0;
        c.d_trans = 16;
        c.dec_layers = 1;
        c.dec_heads = 2;
        c.dec_mlp_ratio = 2;
        c.max_positions = 40;
        c.dit_width = 16;
        c.dit_layers = 1;
        c.dit_heads = 2;
        c.dit_mlp_ratio = 2;
        c.t_feat_dim = 8;
        c.d_utt = 8;
        c.utt_layers = 1;
        c.utt_heads = 2;
        c.utt_max_frames = 32;
        c.d_spk = 4;
        c.asr_n_mels = 12;
        c.asr_frame_rate = 100.0;
        c.asr_width = 8;
        c.asr_layers = 1;
        c.asr_heads = 2;
        c.d_asr = 8;
        return c;
    }

    json to_json() const {
        return json{{"n_mels", n_mels},
                    {"chunk_frames", chunk_frames},
                    {"frame_rate", frame_rate},
                    {"d_trans", d_trans},
                    {"dec_layers", dec_layers},
                    {"dec_heads", dec_heads},
                    {"dec_mlp_ratio", dec_mlp_ratio},
                    {"max_positions", max_positions},
                    {"use_role_positions", use_role_positions},
                    {"dit_width", dit_width},
                    {"dit_layers", dit_layers},
                    {"dit_heads", dit_heads},
                    {"dit_mlp_ratio", dit_mlp_ratio},
                    {"t_feat_dim", t_feat_dim},
                    {"d_utt", d_utt},
                    {"utt_layers", utt_layers},
                    {"utt_heads", utt_heads},
                    {"utt_max_frames", utt_max_frames},
                    {"d_spk", d_spk},
                    {"asr_n_mels", asr_n_mels},
                    {"asr_frame_rate", asr_frame_rate},
                    {"asr_downsample", asr_downsample},
                    {"asr_width", asr_width},
                    {"asr_layers", asr_layers},
                    {"asr_heads", asr_heads},
                    {"d_asr", d_asr},
                    {"vocab_size", vocab_size}};
    }
    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.n_mels = j.at("n_mels");
        c.chunk_frames = j.at("chunk_frames");
        c.frame_rate = j.at("frame_rate");
        c.d_trans = j.at("d_trans");
        c.dec_layers = j.at("dec_layers");
        c.dec_heads = j.at("dec_heads");
        c.dec_mlp_ratio = j.at("dec_mlp_ratio");
        c.max_positions = j.at("max_positions");
        c.use_role_positions = j.at("use_role_positions");
        c.dit_width = j.at("dit_width");
        c.dit_layers = j.at("dit_layers");
        c.dit_heads = j.at("dit_heads");
        c.dit_mlp_ratio = j.at("dit_mlp_ratio");
        c.t_feat_dim = j.at("t_feat_dim");
        c.d_utt = j.at("d_utt");
        c.utt_layers = j.at("utt_layers");
        c.utt_heads = j.at("utt_heads");
        c.utt_max_frames = j.at("utt_max_frames");
        c.d_spk = j.at("d_spk");
        c.asr_n_mels = j.at("asr_n_mels");
        c.asr_frame_rate = j.at("asr_frame_rate");
        c.asr_downsample = j.at("asr_downsample");
        c.asr_width = j.at("asr_width");
        c.asr_layers = j.at("asr_layers");
        c.asr_heads = j.at("asr_heads");
        c.d_asr = j.at("d_asr");
        c.vocab_size = j.at("vocab_size");
        return c;
    }
};

}  // namespace melatts
