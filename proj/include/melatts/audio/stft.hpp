#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "melatts/core/matrix.hpp"

namespace melatts {

// Iterative radix-2 FFT, in place. Sizes are powers of two; frames are
// zero-padded up to the transform size by the callers.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

inline int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Periodic Hann window.
inline std::vector<double> hann_window(int length) {
    std::vector<double> w(length);
    for (int i = 0; i < length; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / length));
    return w;
}

struct StftResult {
    // [frames, n_fft/2 + 1]
    std::vector<std::vector<std::complex<double>>> bins;
    int n_fft = 0;
};

// Center-padded (reflect) STFT; frame f covers samples around f*hop.
// num_frames = len / hop (floor).
inline StftResult stft(const std::vector<float>& wave, int win_length, int hop_length, int n_fft = 0) {
    if (wave.empty()) throw std::invalid_argument("stft: empty waveform");
    if (n_fft == 0) n_fft = next_pow2(win_length);
    const int num_frames = static_cast<int>(wave.size()) / hop_length;
    const auto window = hann_window(win_length);
    const int half = win_length / 2;
    const int n = static_cast<int>(wave.size());

    auto sample_at = [&](int idx) -> double {
        // reflect padding
        if (idx < 0) idx = -idx;
        if (idx >= n) idx = 2 * n - 2 - idx;
        if (idx < 0 || idx >= n) return 0.0;  // degenerate very short input
        return wave[idx];
    };

    StftResult out;
    out.n_fft = n_fft;
    out.bins.resize(num_frames);
    std::vector<std::complex<double>> buf(n_fft);
    for (int f = 0; f < num_frames; ++f) {
        const int center = f * hop_length;
        std::fill(buf.begin(), buf.end(), std::complex<double>(0, 0));
        for (int i = 0; i < win_length; ++i)
            buf[i] = sample_at(center - half + i) * window[i];
        fft_inplace(buf, false);
        out.bins[f].assign(buf.begin(), buf.begin() + n_fft / 2 + 1);
    }
    return out;
}

// Overlap-add inverse with window-square normalization. Returns
// num_frames * hop samples.
inline std::vector<float> istft(const std::vector<std::vector<std::complex<double>>>& bins, int n_fft,
                                int win_length, int hop_length) {
    const int num_frames = static_cast<int>(bins.size());
    const auto window = hann_window(win_length);
    const int half = win_length / 2;
    const int out_len = num_frames * hop_length;
    std::vector<double> acc(out_len + win_length, 0.0);
    std::vector<double> norm(out_len + win_length, 0.0);

    std::vector<std::complex<double>> buf(n_fft);
    for (int f = 0; f < num_frames; ++f) {
        std::fill(buf.begin(), buf.end(), std::complex<double>(0, 0));
        const int half_bins = n_fft / 2 + 1;
        for (int k = 0; k < half_bins; ++k) {
            buf[k] = bins[f][k];
            if (k > 0 && k < n_fft / 2) buf[n_fft - k] = std::conj(bins[f][k]);
        }
        fft_inplace(buf, true);
        const int center = f * hop_length;
        for (int i = 0; i < win_length; ++i) {
            const int idx = center - half + i + half;  // shift by half so indices stay non-negative
            acc[idx] += buf[i].real() * window[i];
            norm[idx] += window[i] * window[i];
        }
    }
    std::vector<float> out(out_len);
    for (int i = 0; i < out_len; ++i) {
        const double d = norm[i + half];
        out[i] = static_cast<float>(d > 1e-9 ? acc[i + half] / d : 0.0);
    }
    return out;
}

}  // namespace melatts
