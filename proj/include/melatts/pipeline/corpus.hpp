#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/core/container.hpp"
#include "melatts/core/rng.hpp"
#include "melatts/features.hpp"
#include "melatts/tokenizer.hpp"

namespace melatts {

// Synthetic corpus: each token class owns a fixed mel template spanning one
// chunk; a speaker is a scalar coefficient on a shared spectral-tilt basis
// vector; utterances are template concatenations plus tilt plus noise. The
// injective token-to-template map makes content decodable by
// nearest-template search, standing in for an ASR-based error rate.
struct ToyCorpusSpec {
    int num_classes = 16;             // K
    int chunk_frames = 8;
    int n_mels = 80;
    int num_speakers = 2;
    double tilt_strength = 1.0;       // coefficient magnitude on the tilt basis
    int min_tokens = 3;
    int max_tokens = 8;
    double noise_level = 0.1;         // stddev in log-mel space
    int num_train = 512;
    int num_eval = 64;
    double template_margin = 8.0;     // minimum pairwise template distance
    double active_level = 3.0;        // hot-band log energy
    double floor_level = -11.5;       // background, ~log(1e-5)

    void validate() const {
        if (num_classes < 1 || num_classes > 26) throw std::invalid_argument("ToyCorpusSpec: 1..26 classes");
        if (chunk_frames < 2 || n_mels < 8) throw std::invalid_argument("ToyCorpusSpec: geometry too small");
        if (num_speakers < 1) throw std::invalid_argument("ToyCorpusSpec: need a speaker");
        if (min_tokens < 1 || max_tokens < min_tokens) throw std::invalid_argument("ToyCorpusSpec: bad lengths");
        if (noise_level < 0) throw std::invalid_argument("ToyCorpusSpec: negative noise");
        if (num_train < 1) throw std::invalid_argument("ToyCorpusSpec: empty train split");
    }

    json to_json() const {
        return json{{"num_classes", num_classes},   {"chunk_frames", chunk_frames},
                    {"n_mels", n_mels},             {"num_speakers", num_speakers},
                    {"tilt_strength", tilt_strength}, {"min_tokens", min_tokens},
                    {"max_tokens", max_tokens},     {"noise_level", noise_level},
                    {"num_train", num_train},       {"num_eval", num_eval},
                    {"template_margin", template_margin}, {"active_level", active_level},
                    {"floor_level", floor_level}};
    }
    static ToyCorpusSpec from_json(const json& j) {
        ToyCorpusSpec s;
        s.num_classes = j.at("num_classes");
        s.chunk_frames = j.at("chunk_frames");
        s.n_mels = j.at("n_mels");
        s.num_speakers = j.at("num_speakers");
        s.tilt_strength = j.at("tilt_strength");
        s.min_tokens = j.at("min_tokens");
        s.max_tokens = j.at("max_tokens");
        s.noise_level = j.at("noise_level");
        s.num_train = j.at("num_train");
        s.num_eval = j.at("num_eval");
        s.template_margin = j.at("template_margin");
        s.active_level = j.at("active_level");
        s.floor_level = j.at("floor_level");
        return s;
    }
};

struct CorpusItem {
    std::vector<int> token_classes;  // class k in [0, K), one per chunk
    std::string text;                // character form, 'a' + k
    int speaker = 0;
    Matrix<float> mel;               // raw log-mel [tokens * chunk_frames, n_mels]
};

struct Corpus {
    ToyCorpusSpec spec;
    uint64_t seed = 0;
    std::vector<Matrix<float>> templates;  // K of [chunk_frames, n_mels]
    Matrix<float> tilt_basis;              // [1, n_mels], zero-mean
    std::vector<double> speaker_tilt;      // coefficient per speaker
    std::vector<CorpusItem> train;
    std::vector<CorpusItem> eval;

    const std::vector<CorpusItem>& split(bool eval_split) const { return eval_split ? eval : train; }

    Tokenizer tokenizer() const { return Tokenizer::for_classes(spec.num_classes); }
};

namespace detail {

inline std::vector<Matrix<float>> make_templates(const ToyCorpusSpec& spec, Rng& rng) {
    const int band_width = 4;
    const int band_stride = 4;
    if (band_stride * (spec.num_classes - 1) + band_width + 2 > spec.n_mels)
        throw std::invalid_argument("generate_corpus: too many token classes for the mel band count");
    std::vector<Matrix<float>> templates;
    templates.reserve(spec.num_classes);
    for (int k = 0; k < spec.num_classes; ++k) {
        Matrix<float> tpl(spec.chunk_frames, spec.n_mels, static_cast<float>(spec.floor_level));
        const int b0 = 2 + band_stride * k;
        for (int f = 0; f < spec.chunk_frames; ++f) {
            // per-class temporal envelope so templates are position-aware
            const double env = 0.5 + 0.5 * std::sin(M_PI * (f + 0.5) / spec.chunk_frames + 0.35 * k);
            for (int b = b0; b < b0 + band_width; ++b)
                tpl(f, b) = static_cast<float>(spec.floor_level +
                                               (spec.active_level - spec.floor_level) * (0.55 + 0.45 * env));
        }
        // small fixed per-class texture
        for (size_t i = 0; i < tpl.size(); ++i)
            tpl.data()[i] += static_cast<float>(0.05 * rng.gaussian());
        templates.push_back(std::move(tpl));
    }
    double min_dist = std::numeric_limits<double>::infinity();
    for (int a = 0; a < spec.num_classes; ++a)
        for (int b = a + 1; b < spec.num_classes; ++b) {
            double d2 = 0;
            for (size_t i = 0; i < templates[a].size(); ++i) {
                const double d = templates[a].data()[i] - templates[b].data()[i];
                d2 += d * d;
            }
            min_dist = std::min(min_dist, std::sqrt(d2));
        }
    if (min_dist < spec.template_margin)
        throw std::invalid_argument("generate_corpus: template margin violated (" + std::to_string(min_dist) +
                                    " < " + std::to_string(spec.template_margin) + ")");
    return templates;
}

inline Matrix<float> make_tilt_basis(int n_mels) {
    Matrix<float> g(1, n_mels);
    for (int b = 0; b < n_mels; ++b)
        g(0, b) = static_cast<float>(2.0 * b / (n_mels - 1) - 1.0);  // zero-mean ramp
    return g;
}

inline CorpusItem make_item(const Corpus& corpus, Rng& rng) {
    const auto& spec = corpus.spec;
    CorpusItem item;
    item.speaker = rng.uniform_int(spec.num_speakers);
    const int n_tok = rng.uniform_int(spec.min_tokens, spec.max_tokens);
    item.token_classes.reserve(n_tok);
    for (int i = 0; i < n_tok; ++i) item.token_classes.push_back(rng.uniform_int(spec.num_classes));
    for (int k : item.token_classes) item.text.push_back(static_cast<char>('a' + k));

    item.mel = Matrix<float>(n_tok * spec.chunk_frames, spec.n_mels);
    const double tilt = corpus.speaker_tilt[item.speaker];
    for (int i = 0; i < n_tok; ++i) {
        const Matrix<float>& tpl = corpus.templates[item.token_classes[i]];
        for (int f = 0; f < spec.chunk_frames; ++f)
            for (int b = 0; b < spec.n_mels; ++b)
                item.mel(i * spec.chunk_frames + f, b) =
                    tpl(f, b) + static_cast<float>(tilt * corpus.tilt_basis(0, b) +
                                                   spec.noise_level * rng.gaussian());
    }
    return item;
}

}  // namespace detail

// Deterministic synthetic corpus from (spec, seed); the token-to-template
// alignment is the identity (token i spans chunk i), recorded per item as
// token_classes.
inline Corpus generate_corpus(const ToyCorpusSpec& spec, uint64_t seed) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;
    corpus.seed = seed;
    Rng tpl_rng(derive_seed(seed, 1));
    corpus.templates = detail::make_templates(spec, tpl_rng);
    corpus.tilt_basis = detail::make_tilt_basis(spec.n_mels);
    corpus.speaker_tilt.resize(spec.num_speakers);
    for (int s = 0; s < spec.num_speakers; ++s)
        corpus.speaker_tilt[s] =
            spec.num_speakers == 1 ? 0.0 : spec.tilt_strength * (2.0 * s / (spec.num_speakers - 1) - 1.0);

    Rng item_rng(derive_seed(seed, 2));
    corpus.train.reserve(spec.num_train);
    for (int i = 0; i < spec.num_train; ++i) corpus.train.push_back(detail::make_item(corpus, item_rng));
    corpus.eval.reserve(spec.num_eval);
    for (int i = 0; i < spec.num_eval; ++i) corpus.eval.push_back(detail::make_item(corpus, item_rng));
    return corpus;
}

// Nearest-template decoding with the speaker tilt projected out: for each
// chunk and candidate, the time-constant component of the residual along the
// tilt basis is removed before scoring, so decoding is invariant to the
// per-speaker coloration.
inline std::vector<int> oracle_decode(const Matrix<float>& mel, const Corpus& corpus) {
    const auto& spec = corpus.spec;
    const int N = spec.chunk_frames;
    const int n_chunks = mel.rows() / N;  // trailing partial frames are ignored
    double g2 = 0;
    for (int b = 0; b < spec.n_mels; ++b)
        g2 += static_cast<double>(corpus.tilt_basis(0, b)) * corpus.tilt_basis(0, b);

    std::vector<int> tokens;
    tokens.reserve(n_chunks);
    std::vector<double> residual_mean(spec.n_mels);
    for (int c = 0; c < n_chunks; ++c) {
        double best = std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < spec.num_classes; ++k) {
            const Matrix<float>& tpl = corpus.templates[k];
            std::fill(residual_mean.begin(), residual_mean.end(), 0.0);
            for (int f = 0; f < N; ++f)
                for (int b = 0; b < spec.n_mels; ++b)
                    residual_mean[b] += mel(c * N + f, b) - tpl(f, b);
            double proj = 0;
            for (int b = 0; b < spec.n_mels; ++b) proj += residual_mean[b] / N * corpus.tilt_basis(0, b);
            const double coef = proj / g2;
            double score = 0;
            for (int f = 0; f < N; ++f)
                for (int b = 0; b < spec.n_mels; ++b) {
                    const double r = mel(c * N + f, b) - tpl(f, b) - coef * corpus.tilt_basis(0, b);
                    score += r * r;
                }
            if (score < best) {
                best = score;
                best_k = k;
            }
        }
        tokens.push_back(best_k);
    }
    return tokens;
}

// Position-wise match rate normalized by the longer sequence, so length
// errors count against accuracy.
inline double content_accuracy(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
    const size_t n = std::max(reference.size(), hypothesis.size());
    if (n == 0) return 1.0;
    size_t match = 0;
    for (size_t i = 0; i < std::min(reference.size(), hypothesis.size()); ++i)
        if (reference[i] == hypothesis[i]) ++match;
    return static_cast<double>(match) / static_cast<double>(n);
}

// The frozen-encoder front end runs at twice the synthesis frame rate with a
// wider mel axis; the corpus is mel-native, so its input is derived by exact
// frame duplication and linear band interpolation.
inline Matrix<float> expand_mel_for_encoder(const Matrix<float>& mel, int target_bands) {
    const int L = mel.rows(), B = mel.cols();
    Matrix<float> out(2 * L, target_bands);
    for (int r = 0; r < L; ++r) {
        for (int b = 0; b < target_bands; ++b) {
            const double x = static_cast<double>(b) * (B - 1) / (target_bands - 1);
            const int lo = static_cast<int>(x);
            const int hi = std::min(lo + 1, B - 1);
            const double frac = x - lo;
            const float v = static_cast<float>((1.0 - frac) * mel(r, lo) + frac * mel(r, hi));
            out(2 * r, b) = v;
            out(2 * r + 1, b) = v;
        }
    }
    return out;
}

// ---- corpus directory I/O ----

inline void save_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json meta;
    meta["kind"] = "toy_corpus";
    meta["schema"] = 1;
    meta["spec"] = corpus.spec.to_json();
    meta["seed"] = corpus.seed;
    auto items_json = [&](const std::vector<CorpusItem>& items, const std::string& split) {
        json arr = json::array();
        for (size_t i = 0; i < items.size(); ++i) {
            const std::string file = split + "_" + std::to_string(i) + ".mel";
            arr.push_back(json{{"text", items[i].text},
                               {"speaker", items[i].speaker},
                               {"token_classes", items[i].token_classes},
                               {"mel", file}});
            MelSpectrogram mel;
            mel.frames = items[i].mel;
            mel.config = MelConfig::synthesis_default();
            mel.config.n_mels = items[i].mel.cols();
            mel.frame_rate = mel.config.frame_rate();
            save_mel((fs::path(dir) / file).string(), mel);
        }
        return arr;
    };
    meta["train"] = items_json(corpus.train, "train");
    meta["eval"] = items_json(corpus.eval, "eval");
    std::ofstream out(fs::path(dir) / "corpus.json");
    out << meta.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write corpus.json in " + dir);
}

inline Corpus load_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "corpus.json");
    if (!in) throw std::runtime_error("cannot open corpus.json in " + dir);
    json meta = json::parse(in);
    if (meta.value("kind", "") != "toy_corpus") throw std::runtime_error("not a corpus directory: " + dir);

    Corpus corpus = generate_corpus(ToyCorpusSpec::from_json(meta.at("spec")), meta.at("seed"));
    auto load_items = [&](const json& arr, std::vector<CorpusItem>& items) {
        if (arr.size() != items.size()) throw std::runtime_error("corpus item count mismatch in " + dir);
        for (size_t i = 0; i < arr.size(); ++i) {
            const auto mel = load_mel((fs::path(dir) / arr[i].at("mel").get<std::string>()).string());
            if (!mel.frames.same_shape(items[i].mel) || arr[i].at("text") != items[i].text)
                throw std::runtime_error("corpus item diverges from its generation seed in " + dir);
            items[i].mel = mel.frames;
        }
    };
    load_items(meta.at("train"), corpus.train);
    load_items(meta.at("eval"), corpus.eval);
    return corpus;
}

}  // namespace melatts
