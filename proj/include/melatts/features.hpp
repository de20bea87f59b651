#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/audio/stft.hpp"
#include "melatts/core/container.hpp"
#include "melatts/core/matrix.hpp"
#include "melatts/core/rng.hpp"

namespace melatts {

// Front-end configuration. The synthesis side runs 24 kHz / 80 mels /
// hop 480 (50 frames per second); the frozen-encoder side runs 16 kHz /
// 128 mels / hop 160 (100 frames per second).
struct MelConfig {
    int sample_rate = 24000;
    int n_mels = 80;
    int win_length = 1920;
    int hop_length = 480;
    double fmin = 0.0;
    double fmax = 12000.0;
    double log_floor = 1e-5;

    double frame_rate() const { return static_cast<double>(sample_rate) / hop_length; }

    static MelConfig synthesis_default() { return MelConfig{}; }
    static MelConfig encoder_default() { return MelConfig{16000, 128, 400, 160, 0.0, 8000.0, 1e-5}; }

    void validate() const {
        if (sample_rate <= 0 || n_mels < 1 || win_length <= 0 || hop_length <= 0)
            throw std::invalid_argument("MelConfig: non-positive field");
        if (fmax <= fmin) throw std::invalid_argument("MelConfig: fmax must exceed fmin");
        if (log_floor <= 0) throw std::invalid_argument("MelConfig: log_floor must be positive");
    }

    json to_json() const {
        return json{{"sample_rate", sample_rate}, {"n_mels", n_mels},   {"win_length", win_length},
                    {"hop_length", hop_length},   {"fmin", fmin},       {"fmax", fmax},
                    {"log_floor", log_floor}};
    }
    static MelConfig from_json(const json& j) {
        MelConfig c;
        c.sample_rate = j.at("sample_rate");
        c.n_mels = j.at("n_mels");
        c.win_length = j.at("win_length");
        c.hop_length = j.at("hop_length");
        c.fmin = j.at("fmin");
        c.fmax = j.at("fmax");
        c.log_floor = j.at("log_floor");
        return c;
    }
    std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

struct MelSpectrogram {
    Matrix<float> frames;  // [L, n_mels], natural-log magnitude
    double frame_rate = 0.0;
    MelConfig config;

    int length() const { return frames.rows(); }
    int n_mels() const { return frames.cols(); }
};

// Fixed-size block of chunk_frames consecutive mel frames. The final block
// of an utterance may carry fewer valid frames; the rest is padding.
struct MelChunk {
    Matrix<float> frames;  // [N, n_mels]
    int chunk_index = 0;
    int valid_frames = 0;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filterbank [n_mels, n_fft/2+1] on the HTK mel scale.
inline Matrix<float> mel_filterbank(const MelConfig& cfg, int n_fft) {
    const int half_bins = n_fft / 2 + 1;
    Matrix<float> fb(cfg.n_mels, half_bins);
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(std::min(cfg.fmax, cfg.sample_rate / 2.0));
    std::vector<double> edges(cfg.n_mels + 2);
    for (int m = 0; m < cfg.n_mels + 2; ++m)
        edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (cfg.n_mels + 1));
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (int k = 0; k < half_bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / n_fft;
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            fb(m, k) = static_cast<float>(w);
        }
    }
    return fb;
}

// Waveform to log-mel. L = floor(len / hop); deterministic, no resampling.
inline MelSpectrogram compute_mel(const std::vector<float>& waveform, const MelConfig& config) {
    config.validate();
    if (static_cast<int>(waveform.size()) < config.hop_length)
        throw std::invalid_argument("compute_mel: waveform shorter than one hop");

    const auto spec = stft(waveform, config.win_length, config.hop_length);
    const auto fb = mel_filterbank(config, spec.n_fft);
    const int L = static_cast<int>(spec.bins.size());
    const int half_bins = spec.n_fft / 2 + 1;

    MelSpectrogram mel;
    mel.config = config;
    mel.frame_rate = config.frame_rate();
    mel.frames = Matrix<float>(L, config.n_mels);
    std::vector<double> power(half_bins);
    for (int f = 0; f < L; ++f) {
        for (int k = 0; k < half_bins; ++k) power[k] = std::norm(spec.bins[f][k]);
        for (int m = 0; m < config.n_mels; ++m) {
            double acc = 0.0;
            for (int k = 0; k < half_bins; ++k) acc += fb(m, k) * power[k];
            mel.frames(f, m) = static_cast<float>(std::log(acc + config.log_floor));
        }
    }
    return mel;
}

// Splits into ceil(L/N) chunks; the last chunk is zero-padded with
// valid_frames recorded. Concatenating valid frames reproduces the input.
inline std::vector<MelChunk> chunk_mel(const MelSpectrogram& mel, int chunk_frames) {
    if (chunk_frames <= 0) throw std::invalid_argument("chunk_mel: chunk size must be positive");
    const int L = mel.length();
    const int n_chunks = (L + chunk_frames - 1) / chunk_frames;
    std::vector<MelChunk> chunks;
    chunks.reserve(n_chunks);
    for (int i = 0; i < n_chunks; ++i) {
        MelChunk c;
        c.chunk_index = i;
        c.frames = Matrix<float>(chunk_frames, mel.n_mels());
        c.valid_frames = std::min(chunk_frames, L - i * chunk_frames);
        for (int r = 0; r < c.valid_frames; ++r)
            std::copy(mel.frames.row(i * chunk_frames + r),
                      mel.frames.row(i * chunk_frames + r) + mel.n_mels(), c.frames.row(r));
        chunks.push_back(std::move(c));
    }
    return chunks;
}

inline MelSpectrogram dechunk_mel(const std::vector<MelChunk>& chunks, const MelConfig& config) {
    MelSpectrogram mel;
    mel.config = config;
    mel.frame_rate = config.frame_rate();
    int L = 0;
    for (const auto& c : chunks) L += c.valid_frames;
    mel.frames = Matrix<float>(L, config.n_mels);
    int r = 0;
    for (const auto& c : chunks)
        for (int i = 0; i < c.valid_frames; ++i, ++r)
            std::copy(c.frames.row(i), c.frames.row(i) + c.frames.cols(), mel.frames.row(r));
    return mel;
}

// Griffin-Lim mel inversion; a stand-in for a vocoder, used only to make
// chunks audible. Zero-phase init keeps it deterministic.
inline std::vector<float> invert_mel(const MelSpectrogram& mel, const MelConfig& config, int iterations = 32) {
    if (!mel.frames.all_finite()) throw std::invalid_argument("invert_mel: non-finite input");
    const int L = mel.length();
    if (L == 0) return {};
    const int n_fft = next_pow2(config.win_length);
    const int half_bins = n_fft / 2 + 1;
    const auto fb = mel_filterbank(config, n_fft);

    // Approximate linear power spectrum via normalized transpose of the
    // filterbank, then amplitude.
    std::vector<double> col_norm(half_bins, 0.0);
    for (int m = 0; m < config.n_mels; ++m)
        for (int k = 0; k < half_bins; ++k) col_norm[k] += fb(m, k);
    std::vector<std::vector<double>> amp(L, std::vector<double>(half_bins, 0.0));
    for (int f = 0; f < L; ++f)
        for (int k = 0; k < half_bins; ++k) {
            double acc = 0.0;
            for (int m = 0; m < config.n_mels; ++m) {
                const double p = std::exp(static_cast<double>(mel.frames(f, m))) - config.log_floor;
                acc += fb(m, k) * std::max(0.0, p);
            }
            amp[f][k] = std::sqrt(acc / std::max(1e-8, col_norm[k]));
        }

    std::vector<std::vector<std::complex<double>>> bins(L, std::vector<std::complex<double>>(half_bins));
    for (int f = 0; f < L; ++f)
        for (int k = 0; k < half_bins; ++k) bins[f][k] = amp[f][k];

    std::vector<float> wave;
    for (int it = 0; it < iterations; ++it) {
        wave = istft(bins, n_fft, config.win_length, config.hop_length);
        if (it + 1 == iterations) break;
        const auto re = stft(wave, config.win_length, config.hop_length, n_fft);
        const int frames = std::min<int>(L, static_cast<int>(re.bins.size()));
        for (int f = 0; f < frames; ++f)
            for (int k = 0; k < half_bins; ++k) {
                const auto z = re.bins[f][k];
                const double m = std::abs(z);
                bins[f][k] = m > 1e-12 ? z / m * amp[f][k] : std::complex<double>(amp[f][k], 0.0);
            }
    }
    wave.resize(static_cast<size_t>(L) * config.hop_length, 0.0f);
    return wave;
}

// Contiguous random crop with min_frames <= length <= min(max_frames, L).
inline MelSpectrogram crop_segment(const MelSpectrogram& mel, Rng& rng, int min_frames, int max_frames) {
    const int L = mel.length();
    if (min_frames <= 0 || max_frames < min_frames)
        throw std::invalid_argument("crop_segment: bad frame bounds");
    if (L < min_frames) throw std::invalid_argument("crop_segment: input shorter than min_frames");
    const int hi = std::min(max_frames, L);
    const int len = rng.uniform_int(min_frames, hi);
    const int start = rng.uniform_int(0, L - len);
    MelSpectrogram out;
    out.config = mel.config;
    out.frame_rate = mel.frame_rate;
    out.frames = Matrix<float>(len, mel.n_mels());
    for (int r = 0; r < len; ++r)
        std::copy(mel.frames.row(start + r), mel.frames.row(start + r) + mel.n_mels(), out.frames.row(r));
    return out;
}

// ---- mel archive (JSON header + float32 payload container) ----

inline void save_mel(const std::string& path, const MelSpectrogram& mel) {
    json header{{"kind", "mel"},
                {"schema", 1},
                {"rows", mel.frames.rows()},
                {"cols", mel.frames.cols()},
                {"frame_rate", mel.frame_rate},
                {"config", mel.config.to_json()},
                {"config_hash", mel.config.hash()}};
    write_container(path, header, mel.frames.data(), mel.frames.size());
}

inline MelSpectrogram load_mel(const std::string& path) {
    const auto data = read_container(path);
    if (data.header.value("kind", "") != "mel") throw std::runtime_error("not a mel archive: " + path);
    MelSpectrogram mel;
    mel.config = MelConfig::from_json(data.header.at("config"));
    if (data.header.at("config_hash") != mel.config.hash())
        throw std::runtime_error("mel archive config hash mismatch: " + path);
    mel.frame_rate = data.header.at("frame_rate");
    const int rows = data.header.at("rows"), cols = data.header.at("cols");
    if (data.payload.size() != static_cast<size_t>(rows) * cols)
        throw std::runtime_error("mel archive payload size mismatch: " + path);
    mel.frames = Matrix<float>(rows, cols);
    std::copy(data.payload.begin(), data.payload.end(), mel.frames.data());
    return mel;
}

// Corpus-level scalar normalization applied before the denoiser; the stats
// travel with the checkpoint.
struct MelNorm {
    float mean = 0.0f;
    float std = 1.0f;

    Matrix<float> normalize(const Matrix<float>& raw) const {
        Matrix<float> out = raw;
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] = (out.data()[i] - mean) / std;
        return out;
    }
    Matrix<float> denormalize(const Matrix<float>& normed) const {
        Matrix<float> out = normed;
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] = out.data()[i] * std + mean;
        return out;
    }

    json to_json() const { return json{{"mean", mean}, {"std", std}}; }
    static MelNorm from_json(const json& j) {
        MelNorm n;
        n.mean = j.at("mean");
        n.std = j.at("std");
        return n;
    }
};

inline MelNorm compute_mel_norm(const std::vector<const Matrix<float>*>& mels) {
    double sum = 0.0, sq = 0.0;
    size_t n = 0;
    for (const auto* m : mels) {
        for (size_t i = 0; i < m->size(); ++i) {
            sum += m->data()[i];
            sq += static_cast<double>(m->data()[i]) * m->data()[i];
        }
        n += m->size();
    }
    if (n == 0) throw std::invalid_argument("compute_mel_norm: empty corpus");
    MelNorm norm;
    norm.mean = static_cast<float>(sum / n);
    const double var = sq / n - static_cast<double>(norm.mean) * norm.mean;
    norm.std = static_cast<float>(std::sqrt(std::max(1e-8, var)));
    return norm;
}

}  // namespace melatts
