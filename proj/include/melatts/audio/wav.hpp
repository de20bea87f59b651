#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace melatts {

struct WavData {
    std::vector<float> samples;  // mono, [-1, 1]
    int sample_rate = 0;
};

// 16-bit PCM mono writer.
inline void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path);

    const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
    const uint32_t riff_size = 36 + data_bytes;
    const uint16_t channels = 1, bits = 16, block_align = 2;
    const uint32_t byte_rate = static_cast<uint32_t>(sample_rate) * block_align;
    const uint16_t fmt_pcm = 1;
    const uint32_t fmt_size = 16, sr = static_cast<uint32_t>(sample_rate);

    out.write("RIFF", 4);
    out.write(reinterpret_cast<const char*>(&riff_size), 4);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    out.write(reinterpret_cast<const char*>(&fmt_size), 4);
    out.write(reinterpret_cast<const char*>(&fmt_pcm), 2);
    out.write(reinterpret_cast<const char*>(&channels), 2);
    out.write(reinterpret_cast<const char*>(&sr), 4);
    out.write(reinterpret_cast<const char*>(&byte_rate), 4);
    out.write(reinterpret_cast<const char*>(&block_align), 2);
    out.write(reinterpret_cast<const char*>(&bits), 2);
    out.write("data", 4);
    out.write(reinterpret_cast<const char*>(&data_bytes), 4);
    for (float s : samples) {
        const float clamped = std::clamp(s, -1.0f, 1.0f);
        const int16_t q = static_cast<int16_t>(std::lrintf(clamped * 32767.0f));
        out.write(reinterpret_cast<const char*>(&q), 2);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

// Reads 16-bit PCM WAV; multi-channel input is averaged to mono.
inline WavData read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);

    char riff[4], wave[4];
    uint32_t riff_size = 0;
    in.read(riff, 4);
    in.read(reinterpret_cast<char*>(&riff_size), 4);
    in.read(wave, 4);
    if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
        throw std::runtime_error("not a RIFF/WAVE file: " + path);

    WavData wav;
    uint16_t channels = 0, bits = 0;
    bool got_fmt = false;
    while (in) {
        char id[4];
        uint32_t size = 0;
        in.read(id, 4);
        in.read(reinterpret_cast<char*>(&size), 4);
        if (!in) break;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            std::vector<char> fmt(size);
            in.read(fmt.data(), size);
            uint16_t format;
            std::memcpy(&format, fmt.data(), 2);
            std::memcpy(&channels, fmt.data() + 2, 2);
            uint32_t sr;
            std::memcpy(&sr, fmt.data() + 4, 4);
            std::memcpy(&bits, fmt.data() + 14, 2);
            if (format != 1 || bits != 16) throw std::runtime_error("only 16-bit PCM WAV is supported: " + path);
            wav.sample_rate = static_cast<int>(sr);
            got_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!got_fmt) throw std::runtime_error("data chunk before fmt: " + path);
            const size_t n_frames = size / (2 * channels);
            wav.samples.resize(n_frames);
            std::vector<int16_t> raw(size / 2);
            in.read(reinterpret_cast<char*>(raw.data()), size);
            for (size_t f = 0; f < n_frames; ++f) {
                float acc = 0;
                for (int c = 0; c < channels; ++c) acc += raw[f * channels + c] / 32768.0f;
                wav.samples[f] = acc / channels;
            }
            return wav;
        } else {
            in.seekg(size + (size & 1), std::ios::cur);
        }
    }
    throw std::runtime_error("no data chunk found: " + path);
}

}  // namespace melatts
