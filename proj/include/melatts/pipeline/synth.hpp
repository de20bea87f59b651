#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/core/parallel.hpp"
#include "melatts/pipeline/corpus.hpp"
#include "melatts/pipeline/train.hpp"
#include "melatts/streaming.hpp"

namespace melatts {

enum class SynthMode { Offline, Streaming };

inline std::string to_string(SynthMode m) { return m == SynthMode::Offline ? "offline" : "streaming"; }
inline SynthMode synth_mode_from_string(const std::string& s) {
    if (s == "offline") return SynthMode::Offline;
    if (s == "streaming") return SynthMode::Streaming;
    throw std::invalid_argument("mode must be offline|streaming, got " + s);
}

struct SynthesisResult {
    MelSpectrogram mel;  // raw log-mel
    std::vector<float> waveform;
    GenerationResult gen;
};

inline MelSpectrogram chunks_to_mel(const TtsModel<float>& model, const std::vector<Matrix<float>>& normalized) {
    MelSpectrogram mel;
    mel.config = MelConfig::synthesis_default();
    mel.config.n_mels = model.cfg.n_mels;
    mel.frame_rate = mel.config.frame_rate();
    mel.frames = Matrix<float>(static_cast<int>(normalized.size()) * model.cfg.chunk_frames, model.cfg.n_mels);
    int r = 0;
    for (const auto& c : normalized) {
        const Matrix<float> raw = model.norm.denormalize(c);
        for (int f = 0; f < raw.rows(); ++f, ++r)
            std::copy(raw.row(f), raw.row(f) + raw.cols(), mel.frames.row(r));
    }
    return mel;
}

// Prompt-conditioned synthesis with the offline layout: u and v come from
// the prompt speech, chunks are generated autoregressively until the stop
// head fires, and the mel is made audible with the Griffin-Lim fallback.
inline SynthesisResult synthesize_offline(const TrainState& state, const std::vector<int>& text,
                                          const MelSpectrogram& prompt_mel_raw, const SamplerConfig& sampler,
                                          uint64_t seed, int griffin_lim_iters = 32) {
    GenerationOptions opt;
    opt.policy = state.config.policy;
    opt.sampler = sampler;
    opt.seed = seed;
    opt.stop_threshold = state.config.stop_threshold;
    opt.max_prompt_chunks = state.config.max_prompt_chunks;

    const GenPrompt prompt = make_prompt(state.model, prompt_mel_raw, opt.max_prompt_chunks);
    SynthesisResult out;
    out.gen = generate_offline(state.model, text, prompt, opt);
    out.mel = chunks_to_mel(state.model, out.gen.chunks);
    out.waveform = invert_mel(out.mel, out.mel.config, griffin_lim_iters);
    return out;
}

// ---- evaluation ----

struct EvalMetrics {
    double content_accuracy = 0;
    double ss_proxy = 0;
    double stop_accuracy = 0;
    int utterances = 0;
    int truncated = 0;
};

inline double cosine(const Matrix<float>& a, const Matrix<float>& b) {
    double aa = 0, bb = 0, ab = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        aa += static_cast<double>(a.data()[i]) * a.data()[i];
        bb += static_cast<double>(b.data()[i]) * b.data()[i];
        ab += static_cast<double>(a.data()[i]) * b.data()[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb) + 1e-12);
}

// Deterministic same-speaker prompt choice: the nearest earlier item of the
// same speaker (cyclic), so the prompt is never the target utterance unless
// the speaker has a single item.
inline int prompt_index_for(const std::vector<CorpusItem>& items, int index) {
    const int n = static_cast<int>(items.size());
    for (int d = 1; d < n; ++d) {
        const int j = (index - d % n + n) % n;
        if (items[j].speaker == items[index].speaker) return j;
    }
    return index;
}

// Content accuracy through the oracle decoder (the CER/WER stand-in),
// speaker similarity against the prompt through the frozen speaker
// surrogate, and teacher-forced stop accuracy.
inline EvalMetrics evaluate(const TrainState& state, const Corpus& corpus, bool eval_split, SynthMode mode,
                            int max_utterances, uint64_t seed, int num_threads) {
    const auto& items = corpus.split(eval_split);
    const int n = std::min<int>(max_utterances, static_cast<int>(items.size()));
    if (n == 0) throw std::invalid_argument("evaluate: empty split");
    const auto& model = state.model;

    std::vector<double> acc(n), ss(n), stop_correct(n), stop_total(n);
    std::vector<int> truncated(n, 0);

    parallel_for(n, num_threads, [&](int i) {
        const CorpusItem& item = items[i];
        const CorpusItem& prompt_item = items[prompt_index_for(items, i)];

        MelSpectrogram prompt_mel;
        prompt_mel.frames = prompt_item.mel;
        prompt_mel.config = MelConfig::synthesis_default();
        prompt_mel.config.n_mels = prompt_item.mel.cols();
        prompt_mel.frame_rate = prompt_mel.config.frame_rate();

        GenerationOptions opt;
        opt.policy = state.config.policy;
        opt.sampler = state.config.sampler;
        opt.sampler.seed = 0;
        opt.seed = derive_seed(seed, 0xE7A1, static_cast<uint64_t>(i));
        opt.stop_threshold = state.config.stop_threshold;
        opt.max_prompt_chunks = state.config.max_prompt_chunks;
        opt.hard_cap = static_cast<int>(item.token_classes.size()) + 4;

        const GenPrompt prompt = make_prompt(model, prompt_mel, opt.max_prompt_chunks);
        const std::vector<int> text = model.tokenizer.encode(item.text);
        const GenerationResult gen = mode == SynthMode::Offline
                                         ? generate_offline(model, text, prompt, opt)
                                         : generate_interleaved(model, text, prompt, opt);
        truncated[i] = gen.truncated ? 1 : 0;

        const MelSpectrogram gen_mel = chunks_to_mel(model, gen.chunks);
        const std::vector<int> decoded = oracle_decode(gen_mel.frames, corpus);
        acc[i] = content_accuracy(item.token_classes, decoded);
        ss[i] = cosine(model.speaker_embedding(gen_mel.frames), model.speaker_embedding(prompt_item.mel));

        // teacher-forced stop decisions on the ground-truth sequence
        const std::vector<int> tokens = model.tokenizer.encode(item.text);
        Matrix<float> mel_norm = model.norm.normalize(item.mel);
        const int N = model.cfg.chunk_frames;
        std::vector<Matrix<float>> chunks;
        for (int ci = 0; ci < mel_norm.rows() / N; ++ci) {
            Matrix<float> chunk(N, mel_norm.cols());
            for (int f = 0; f < N; ++f)
                std::copy(mel_norm.row(ci * N + f), mel_norm.row(ci * N + f) + chunk.cols(), chunk.row(f));
            chunks.push_back(std::move(chunk));
        }
        DecoderSequence seq = offline_layout(tokens, static_cast<int>(chunks.size()));
        Tape<float> tape;
        auto bp = bind_params(tape, model.params, /*for_inference=*/true);
        Matrix<float> crop = mel_norm;
        if (crop.rows() > model.cfg.utt_max_frames) {
            Matrix<float> head(model.cfg.utt_max_frames, crop.cols());
            for (int r = 0; r < head.rows(); ++r)
                std::copy(crop.row(r), crop.row(r) + crop.cols(), head.row(r));
            crop = std::move(head);
        }
        auto u_ref = model.utterance_embedding_ref(tape, bp, crop);
        auto dec = model.decoder_forward(tape, bp, seq, u_ref, model.speaker_embedding(item.mel), chunks);
        const auto& logits = tape.val(dec.stop_logits);
        double correct = 0;
        for (int r = 0; r < logits.rows(); ++r) {
            const bool predicted_stop = logits(r, 0) > 0.0;  // sigmoid(z) > 0.5
            if (predicted_stop == (seq.targets[r].stop_label == 1)) ++correct;
        }
        stop_correct[i] = correct;
        stop_total[i] = logits.rows();
    });

    EvalMetrics m;
    m.utterances = n;
    double sc = 0, st = 0;
    for (int i = 0; i < n; ++i) {
        m.content_accuracy += acc[i];
        m.ss_proxy += ss[i];
        sc += stop_correct[i];
        st += stop_total[i];
        m.truncated += truncated[i];
    }
    m.content_accuracy /= n;
    m.ss_proxy /= n;
    m.stop_accuracy = st > 0 ? sc / st : 0.0;
    return m;
}

// Oracle sanity path: ground-truth mels pushed through the same metric
// surface instead of generated speech.
inline EvalMetrics evaluate_ground_truth(const TrainState& state, const Corpus& corpus, bool eval_split,
                                         int max_utterances) {
    const auto& items = corpus.split(eval_split);
    const int n = std::min<int>(max_utterances, static_cast<int>(items.size()));
    if (n == 0) throw std::invalid_argument("evaluate_ground_truth: empty split");
    EvalMetrics m;
    m.utterances = n;
    for (int i = 0; i < n; ++i) {
        const auto decoded = oracle_decode(items[i].mel, corpus);
        m.content_accuracy += content_accuracy(items[i].token_classes, decoded);
        const CorpusItem& prompt_item = items[prompt_index_for(items, i)];
        m.ss_proxy += cosine(state.model.speaker_embedding(items[i].mel),
                             state.model.speaker_embedding(prompt_item.mel));
    }
    m.content_accuracy /= n;
    m.ss_proxy /= n;
    m.stop_accuracy = 1.0;
    return m;
}

// ---- append-only JSONL evaluation reports ----

struct EvalReportEntry {
    int64_t step = 0;
    std::string mode = "offline";
    std::string split = "train";
    double content_accuracy = 0, ss_proxy = 0, stop_accuracy = 0;
    double loss_diff = 0, loss_stop = 0, loss_align = 0;
    int utterances = 0;

    json to_json() const {
        return json{{"step", step},
                    {"mode", mode},
                    {"split", split},
                    {"content_accuracy", content_accuracy},
                    {"ss_proxy", ss_proxy},
                    {"stop_accuracy", stop_accuracy},
                    {"loss_diff", loss_diff},
                    {"loss_stop", loss_stop},
                    {"loss_align", loss_align},
                    {"utterances", utterances}};
    }
    static EvalReportEntry from_json(const json& j) {
        EvalReportEntry e;
        e.step = j.at("step");
        e.mode = j.at("mode");
        e.split = j.at("split");
        e.content_accuracy = j.at("content_accuracy");
        e.ss_proxy = j.at("ss_proxy");
        e.stop_accuracy = j.at("stop_accuracy");
        e.loss_diff = j.value("loss_diff", 0.0);
        e.loss_stop = j.value("loss_stop", 0.0);
        e.loss_align = j.value("loss_align", 0.0);
        e.utterances = j.value("utterances", 0);
        return e;
    }
};

inline void append_report(const std::string& path, const EvalReportEntry& entry) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open report for append: " + path);
    out << entry.to_json().dump() << "\n";
}

inline std::vector<EvalReportEntry> read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    std::vector<EvalReportEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        entries.push_back(EvalReportEntry::from_json(json::parse(line)));
    }
    return entries;
}

}  // namespace melatts
