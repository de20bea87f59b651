#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "melatts/audio/wav.hpp"
#include "melatts/features.hpp"

using namespace melatts;

namespace {

std::vector<float> sine(double freq, double seconds, int sr, float amp = 0.5f) {
    std::vector<float> w(static_cast<size_t>(seconds * sr));
    for (size_t i = 0; i < w.size(); ++i)
        w[i] = amp * static_cast<float>(std::sin(2.0 * M_PI * freq * i / sr));
    return w;
}

}  // namespace

TEST_CASE("compute_mel frame counts match the two front-end configs", "[features]") {
    // 24 kHz synthesis side: 1 s -> 50 frames x 80 mels
    const auto tts = compute_mel(sine(440, 1.0, 24000), MelConfig::synthesis_default());
    CHECK(tts.length() == 50);
    CHECK(tts.n_mels() == 80);
    CHECK(tts.frame_rate == Catch::Approx(50.0));

    // 16 kHz encoder side: 1 s -> 100 frames x 128 mels
    const auto enc = compute_mel(sine(440, 1.0, 16000), MelConfig::encoder_default());
    CHECK(enc.length() == 100);
    CHECK(enc.n_mels() == 128);
    CHECK(enc.frame_rate == Catch::Approx(100.0));
}

TEST_CASE("compute_mel on silence hits the log floor exactly", "[features]") {
    const MelConfig cfg = MelConfig::synthesis_default();
    std::vector<float> silence(24000, 0.0f);
    const auto mel = compute_mel(silence, cfg);
    const float expected = std::log(static_cast<float>(cfg.log_floor));
    for (int f = 0; f < mel.length(); ++f)
        for (int m = 0; m < mel.n_mels(); ++m) REQUIRE(mel.frames(f, m) == Catch::Approx(expected).margin(1e-5));
}

TEST_CASE("compute_mel is pure and rejects degenerate input", "[features]") {
    const auto wave = sine(523, 0.3, 24000);
    const auto a = compute_mel(wave, MelConfig::synthesis_default());
    const auto b = compute_mel(wave, MelConfig::synthesis_default());
    CHECK(max_abs_diff(a.frames, b.frames) == 0.0f);
    CHECK_THROWS_AS(compute_mel({}, MelConfig::synthesis_default()), std::invalid_argument);
    CHECK_THROWS_AS(compute_mel(std::vector<float>(100, 0.1f), MelConfig::synthesis_default()),
                    std::invalid_argument);
}

TEST_CASE("chunk_mel layout and padding", "[features]") {
    const auto mel = compute_mel(sine(440, 1.0, 24000), MelConfig::synthesis_default());
    REQUIRE(mel.length() == 50);
    const auto chunks = chunk_mel(mel, 8);
    REQUIRE(chunks.size() == 7);  // ceil(50 / 8)
    CHECK(chunks.back().valid_frames == 2);
    for (size_t i = 0; i + 1 < chunks.size(); ++i) CHECK(chunks[i].valid_frames == 8);
    // 8 frames at 50 Hz span 160 ms
    CHECK(8.0 / mel.frame_rate == Catch::Approx(0.160));

    const auto one = chunk_mel([&] {
        MelSpectrogram m;
        m.config = mel.config;
        m.frame_rate = mel.frame_rate;
        m.frames = Matrix<float>(8, 80, 1.0f);
        return m;
    }(), 8);
    REQUIRE(one.size() == 1);
    CHECK(one[0].valid_frames == 8);

    CHECK_THROWS_AS(chunk_mel(mel, 0), std::invalid_argument);
}

TEST_CASE("chunk round trip is bit exact for several chunk sizes", "[features]") {
    Rng rng(31);
    for (int n : {1, 4, 8, 16}) {
        MelSpectrogram mel;
        mel.config = MelConfig::synthesis_default();
        mel.frame_rate = 50;
        mel.frames = gaussian_matrix<float>(53, 80, rng);
        const auto chunks = chunk_mel(mel, n);
        const auto back = dechunk_mel(chunks, mel.config);
        REQUIRE(back.frames.same_shape(mel.frames));
        CHECK(max_abs_diff(back.frames, mel.frames) == 0.0f);
    }
}

TEST_CASE("invert_mel silence, length and tone round trip", "[features]") {
    const MelConfig cfg = MelConfig::synthesis_default();

    // silence -> near-zero waveform
    MelSpectrogram silence;
    silence.config = cfg;
    silence.frame_rate = 50;
    silence.frames = Matrix<float>(25, 80, std::log(static_cast<float>(cfg.log_floor)));
    const auto quiet = invert_mel(silence, cfg, 8);
    double rms = 0;
    for (float s : quiet) rms += static_cast<double>(s) * s;
    rms = std::sqrt(rms / quiet.size());
    CHECK(rms < 1e-3);

    // length arithmetic: 50 frames -> 24000 samples within one hop
    const auto mel = compute_mel(sine(440, 1.0, 24000), cfg);
    const auto wave = invert_mel(mel, cfg, 4);
    CHECK(std::abs(static_cast<long>(wave.size()) - 24000L) <= cfg.hop_length);

    // tone round trip: dominant STFT bin of the reconstruction should sit in
    // the mel band holding the tone
    const auto recon = invert_mel(mel, cfg, 32);
    const auto spec = stft(recon, cfg.win_length, cfg.hop_length);
    const int frame = spec.bins.size() / 2;
    int peak_bin = 0;
    double peak = 0;
    for (size_t k = 0; k < spec.bins[frame].size(); ++k) {
        const double m = std::abs(spec.bins[frame][k]);
        if (m > peak) {
            peak = m;
            peak_bin = static_cast<int>(k);
        }
    }
    const double peak_hz = static_cast<double>(peak_bin) * cfg.sample_rate / spec.n_fft;
    CHECK(std::abs(peak_hz - 440.0) < 80.0);
}

TEST_CASE("crop_segment determinism, bounds and errors", "[features]") {
    Rng gen(21);
    MelSpectrogram mel;
    mel.config = MelConfig::synthesis_default();
    mel.frame_rate = 50;
    mel.frames = gaussian_matrix<float>(100, 80, gen);

    Rng a(123), b(123);
    const auto ca = crop_segment(mel, a, 25, 75);
    const auto cb = crop_segment(mel, b, 25, 75);
    REQUIRE(ca.frames.same_shape(cb.frames));
    CHECK(max_abs_diff(ca.frames, cb.frames) == 0.0f);

    Rng c(9);
    for (int i = 0; i < 1000; ++i) {
        const auto crop = crop_segment(mel, c, 25, 75);
        REQUIRE(crop.length() >= 25);
        REQUIRE(crop.length() <= 75);
    }

    MelSpectrogram tiny;
    tiny.config = mel.config;
    tiny.frames = gaussian_matrix<float>(25, 80, gen);
    Rng d(4);
    const auto full = crop_segment(tiny, d, 25, 75);
    CHECK(full.length() == 25);
    CHECK(max_abs_diff(full.frames, tiny.frames) == 0.0f);

    MelSpectrogram too_short;
    too_short.config = mel.config;
    too_short.frames = gaussian_matrix<float>(10, 80, gen);
    Rng e(4);
    CHECK_THROWS_AS(crop_segment(too_short, e, 25, 75), std::invalid_argument);
}

TEST_CASE("mel archive and wav round trips", "[features]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "melatts_features_test";
    fs::create_directories(dir);

    Rng rng(3);
    MelSpectrogram mel;
    mel.config = MelConfig::synthesis_default();
    mel.frame_rate = 50;
    mel.frames = gaussian_matrix<float>(17, 80, rng);
    const std::string path = (dir / "m.mel").string();
    save_mel(path, mel);
    const auto back = load_mel(path);
    CHECK(back.frame_rate == mel.frame_rate);
    CHECK(back.config.hop_length == mel.config.hop_length);
    CHECK(max_abs_diff(back.frames, mel.frames) == 0.0f);

    const auto wave = sine(300, 0.25, 24000);
    const std::string wav_path = (dir / "w.wav").string();
    write_wav(wav_path, wave, 24000);
    const auto wav = read_wav(wav_path);
    CHECK(wav.sample_rate == 24000);
    REQUIRE(wav.samples.size() == wave.size());
    double err = 0;
    for (size_t i = 0; i < wave.size(); ++i) err = std::max(err, std::abs(static_cast<double>(wave[i]) - wav.samples[i]));
    CHECK(err < 1.0 / 32000);  // 16-bit quantization
}

TEST_CASE("mel normalization round trip and stats", "[features]") {
    Rng rng(11);
    Matrix<float> m = gaussian_matrix<float>(40, 80, rng, 2.5);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] += 3.0f;
    MelNorm norm = compute_mel_norm({&m});
    CHECK(norm.mean == Catch::Approx(3.0).margin(0.1));
    CHECK(norm.std == Catch::Approx(2.5).margin(0.1));
    const auto normed = norm.normalize(m);
    const auto back = norm.denormalize(normed);
    CHECK(max_abs_diff(back, m) < 1e-5f);
}
