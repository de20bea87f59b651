#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/align.hpp"
#include "melatts/ar_core.hpp"
#include "melatts/core/parallel.hpp"
#include "melatts/diffusion.hpp"
#include "melatts/pipeline/corpus.hpp"
#include "melatts/sequence.hpp"
#include "melatts/streaming.hpp"

namespace melatts {

// Full training recipe; a run is reproducible from (TrainConfig, corpus
// seed, num_threads). The three loss terms are summed with unit weights by
// construction — there is no weighting knob.
struct TrainConfig {
    uint64_t seed = 1;
    int steps = 2000;
    int batch_size = 8;
    double lr = 3e-4;
    double warmup_frac = 0.05;
    double weight_decay = 0.01;
    AlignTarget align_target = AlignTarget::Asr;
    double interleave_fraction = 0.5;
    double prompt_fraction = 0.5;
    int max_prompt_chunks = 2;
    double cond_dropout = 0.2;
    double history_noise = 0.1;  // stddev added to teacher-forced chunk history
    bool use_utterance_embedding = true;
    double stop_threshold = 0.5;
    int crop_min_frames = 16;
    int crop_max_frames = 64;
    int num_threads = 2;
    int eval_every = 0;  // 0 disables periodic evaluation
    int eval_utterances = 24;
    uint64_t surrogate_seed = 7777;
    InterleavePolicy policy;
    ModelConfig model;
    SamplerConfig sampler;

    void validate() const {
        if (steps < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: steps/batch_size");
        if (interleave_fraction < 0 || interleave_fraction > 1 || prompt_fraction < 0 || prompt_fraction > 1 ||
            cond_dropout < 0 || cond_dropout > 1)
            throw std::invalid_argument("TrainConfig: fractions must lie in [0, 1]");
        if (history_noise < 0) throw std::invalid_argument("TrainConfig: history_noise must be >= 0");
        if (crop_min_frames < 1 || crop_max_frames < crop_min_frames)
            throw std::invalid_argument("TrainConfig: crop bounds");
        if (num_threads < 1) throw std::invalid_argument("TrainConfig: num_threads");
        policy.validate();
        sampler.validate();
    }

    json to_json() const {
        return json{{"seed", seed},
                    {"steps", steps},
                    {"batch_size", batch_size},
                    {"lr", lr},
                    {"warmup_frac", warmup_frac},
                    {"weight_decay", weight_decay},
                    {"align_target", to_string(align_target)},
                    {"interleave_fraction", interleave_fraction},
                    {"prompt_fraction", prompt_fraction},
                    {"max_prompt_chunks", max_prompt_chunks},
                    {"cond_dropout", cond_dropout},
                    {"history_noise", history_noise},
                    {"use_utterance_embedding", use_utterance_embedding},
                    {"stop_threshold", stop_threshold},
                    {"crop_min_frames", crop_min_frames},
                    {"crop_max_frames", crop_max_frames},
                    {"num_threads", num_threads},
                    {"eval_every", eval_every},
                    {"eval_utterances", eval_utterances},
                    {"surrogate_seed", surrogate_seed},
                    {"interleave_n", policy.text_per_block},
                    {"interleave_m", policy.chunks_per_block},
                    {"model", model.to_json()},
                    {"sampler", sampler.to_json()}};
    }
    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.seed = j.at("seed");
        c.steps = j.at("steps");
        c.batch_size = j.at("batch_size");
        c.lr = j.at("lr");
        c.warmup_frac = j.at("warmup_frac");
        c.weight_decay = j.at("weight_decay");
        c.align_target = align_target_from_string(j.at("align_target"));
        c.interleave_fraction = j.at("interleave_fraction");
        c.prompt_fraction = j.at("prompt_fraction");
        c.max_prompt_chunks = j.at("max_prompt_chunks");
        c.cond_dropout = j.at("cond_dropout");
        c.history_noise = j.at("history_noise");
        c.use_utterance_embedding = j.at("use_utterance_embedding");
        c.stop_threshold = j.at("stop_threshold");
        c.crop_min_frames = j.at("crop_min_frames");
        c.crop_max_frames = j.at("crop_max_frames");
        c.num_threads = j.at("num_threads");
        c.eval_every = j.at("eval_every");
        c.eval_utterances = j.at("eval_utterances");
        c.surrogate_seed = j.at("surrogate_seed");
        c.policy.text_per_block = j.at("interleave_n");
        c.policy.chunks_per_block = j.at("interleave_m");
        c.model = ModelConfig::from_json(j.at("model"));
        c.sampler = SamplerConfig::from_json(j.at("sampler"));
        return c;
    }
};

struct TrainState {
    TrainConfig config;
    TtsModel<float> model;
    SurrogateAsrEncoder asr_encoder;
    std::vector<Matrix<float>> adam_m, adam_v;  // aligned with model.params.entries
    int64_t step = 0;
};

struct StepStats {
    double loss_diff = 0, loss_stop = 0, loss_align = 0, total = 0;
    double lr = 0;
    int chunks = 0;
    int null_conditions = 0;  // chunks trained on the unconditional branch
};

// Per-item caches shared by training and evaluation.
struct PreparedItem {
    std::vector<int> tokens;  // vocab ids
    Matrix<float> mel_norm;
    std::vector<Matrix<float>> chunks;   // normalized, all full
    Matrix<float> align_target;          // semantic rows or normalized mel rows; empty if disabled
};

class Trainer {
public:
    // Fresh run: initializes parameters, normalization stats and the frozen
    // encoders from the config seeds.
    Trainer(const TrainConfig& config, const Corpus& corpus) : corpus_(corpus) {
        config.validate();
        state_.config = config;
        state_.config.model.vocab_size = corpus.tokenizer().vocab_size();
        state_.model.cfg = state_.config.model;
        state_.model.tokenizer = corpus.tokenizer();
        state_.model.use_utterance_embedding = config.use_utterance_embedding;
        state_.model.align_target = config.align_target;
        Rng init_rng(derive_seed(config.seed, 0x1417));
        state_.model.init(init_rng);
        state_.asr_encoder.init(state_.config.model, config.surrogate_seed);

        std::vector<const Matrix<float>*> mels;
        for (const auto& item : corpus.train) mels.push_back(&item.mel);
        state_.model.norm = compute_mel_norm(mels);

        init_optimizer_state();
        prepare_items();
    }

    // Resume from a checkpointed state; the corpus must be the one the run
    // started from.
    Trainer(TrainState state, const Corpus& corpus) : corpus_(corpus), state_(std::move(state)) {
        state_.config.validate();
        if (state_.model.tokenizer.vocab_size() != corpus.tokenizer().vocab_size())
            throw std::invalid_argument("Trainer: checkpoint vocabulary does not match the corpus");
        prepare_items();
    }

    TrainState& state() { return state_; }
    const TrainState& state() const { return state_; }
    const Corpus& corpus() const { return corpus_; }
    const std::vector<PreparedItem>& prepared_train() const { return prepared_train_; }
    const std::vector<PreparedItem>& prepared_eval() const { return prepared_eval_; }

    double learning_rate(int64_t step) const {
        const auto& c = state_.config;
        const int warmup = std::max(1, static_cast<int>(std::lround(c.warmup_frac * c.steps)));
        if (step < warmup) return c.lr * static_cast<double>(step + 1) / warmup;
        const double prog =
            c.steps == warmup ? 1.0 : static_cast<double>(step - warmup) / (c.steps - warmup);
        return c.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, prog)));
    }

    // One optimizer update on L_diff + L_stop + L_align over a freshly drawn
    // batch. Deterministic given (config, corpus seed): every random choice
    // derives from (seed, step, slot).
    StepStats train_step() {
        const auto& c = state_.config;
        const int B = c.batch_size;
        const int workers = std::min(c.num_threads, B);
        std::vector<GradBuffer<float>> grads(workers, GradBuffer<float>(state_.model.params));
        std::vector<StepStats> stats(B);
        const int chunk = (B + workers - 1) / workers;

        parallel_for(workers, workers, [&](int w) {
            for (int slot = w * chunk; slot < std::min(B, (w + 1) * chunk); ++slot)
                stats[slot] = example_backward(state_.step, slot, grads[w]);
        });

        StepStats agg;
        agg.lr = learning_rate(state_.step);
        for (int slot = 0; slot < B; ++slot) {
            agg.loss_diff += stats[slot].loss_diff;
            agg.loss_stop += stats[slot].loss_stop;
            agg.loss_align += stats[slot].loss_align;
            agg.chunks += stats[slot].chunks;
            agg.null_conditions += stats[slot].null_conditions;
        }
        agg.loss_diff /= B;
        agg.loss_stop /= B;
        agg.loss_align /= B;
        agg.total = agg.loss_diff + agg.loss_stop + agg.loss_align;
        if (!std::isfinite(agg.total)) {
            json dump{{"step", state_.step},
                      {"loss_diff", agg.loss_diff},
                      {"loss_stop", agg.loss_stop},
                      {"loss_align", agg.loss_align}};
            throw std::runtime_error("train_step: non-finite loss, aborting: " + dump.dump());
        }

        GradBuffer<float>& total = grads[0];
        for (int w = 1; w < workers; ++w) total.add(grads[w]);
        total.scale(1.0f / static_cast<float>(B));
        adamw_update(total, agg.lr);
        ++state_.step;
        return agg;
    }

    // Loss of a single example; also used by the resume-equivalence and
    // gradient tests.
    StepStats example_backward(int64_t step, int slot, GradBuffer<float>& grads) {
        const auto& c = state_.config;
        const auto& model = state_.model;
        Rng rng(derive_seed(c.seed, 0x57E9, static_cast<uint64_t>(step), static_cast<uint64_t>(slot)));

        const int item_idx = rng.uniform_int(static_cast<int>(corpus_.train.size()));
        const CorpusItem& item = corpus_.train[item_idx];
        const PreparedItem& prep = prepared_train_[item_idx];
        const LayoutMode mode = mixed_batch_mode(rng, c.interleave_fraction);

        // Prompt-style conditioning: chunks from another same-speaker
        // utterance become history, and u/v derive from that utterance, the
        // same interface inference uses.
        int prompt_count = 0;
        int prompt_item_idx = item_idx;
        int prompt_chunk_start = 0;
        if (c.max_prompt_chunks > 0 && rng.bernoulli(c.prompt_fraction)) {
            prompt_count = rng.uniform_int(1, c.max_prompt_chunks);
            const auto& same = speaker_items_[item.speaker];
            prompt_item_idx = same[rng.uniform_int(static_cast<int>(same.size()))];
            const int avail = static_cast<int>(prepared_train_[prompt_item_idx].chunks.size());
            prompt_count = std::min(prompt_count, avail);
            prompt_chunk_start = rng.uniform_int(0, avail - prompt_count);
        }
        const CorpusItem& cond_item = corpus_.train[prompt_item_idx];
        const PreparedItem& cond_prep = prepared_train_[prompt_item_idx];

        // crop for the utterance embedding
        const int crop_hi = std::min(c.crop_max_frames, cond_prep.mel_norm.rows());
        const int crop_lo = std::min(c.crop_min_frames, crop_hi);
        const int crop_len = rng.uniform_int(crop_lo, crop_hi);
        const int crop_start = rng.uniform_int(0, cond_prep.mel_norm.rows() - crop_len);
        Matrix<float> crop(crop_len, cond_prep.mel_norm.cols());
        for (int r = 0; r < crop_len; ++r)
            std::copy(cond_prep.mel_norm.row(crop_start + r),
                      cond_prep.mel_norm.row(crop_start + r) + crop.cols(), crop.row(r));

        const Matrix<float> v = model.speaker_embedding(cond_item.mel);

        DecoderSequence seq = build_training_sequence(prep.tokens, static_cast<int>(prep.chunks.size()), mode,
                                                      c.policy, prompt_count);
        std::vector<Matrix<float>> chunks;
        chunks.reserve(prompt_count + prep.chunks.size());
        for (int i = 0; i < prompt_count; ++i)
            chunks.push_back(cond_prep.chunks[prompt_chunk_start + i]);
        for (const auto& ch : prep.chunks) chunks.push_back(ch);

        // teacher-forced history carries small noise so inference-time
        // generated feedback stays in distribution; targets stay clean
        std::vector<Matrix<float>> history = chunks;
        if (c.history_noise > 0)
            for (auto& ch : history)
                for (size_t i = 0; i < ch.size(); ++i)
                    ch.data()[i] += static_cast<float>(c.history_noise * rng.gaussian());

        Tape<float> tape;
        auto bp = bind_params(tape, model.params);
        auto u_ref = model.utterance_embedding_ref(tape, bp, crop);
        auto dec = model.decoder_forward(tape, bp, seq, u_ref, v, history);

        std::vector<int> stop_labels;
        stop_labels.reserve(seq.targets.size());
        for (const auto& t : seq.targets) stop_labels.push_back(t.stop_label);
        auto l_stop = model.stop_loss(tape, dec.stop_logits, stop_labels);

        StepStats out;
        const int N = c.model.chunk_frames;
        std::vector<DitBatchItem<float>> items;
        items.reserve(seq.targets.size());
        Matrix<float> stacked_targets(static_cast<int>(seq.targets.size()) * N, c.model.n_mels);
        auto v_ref = tape.constant(v);
        for (size_t j = 0; j < seq.targets.size(); ++j) {
            const auto& target = seq.targets[j];
            const double t_diff = rng.uniform();
            Matrix<float> eps = gaussian_matrix<float>(N, c.model.n_mels, rng);
            const bool drop = rng.bernoulli(c.cond_dropout);
            const Matrix<float>& x0 = chunks[target.chunk_id];
            for (int f = 0; f < N; ++f)
                std::copy(x0.row(f), x0.row(f) + x0.cols(), stacked_targets.row(static_cast<int>(j) * N + f));

            DitBatchItem<float> item;
            item.psi.h_cur = tape.slice_rows(dec.hidden, target.h_pos, target.h_pos + 1);
            item.psi.h_prev = target.prev_h_pos >= 0
                                  ? tape.slice_rows(dec.hidden, target.prev_h_pos, target.prev_h_pos + 1)
                                  : bp["dit.start_h"];
            item.psi.v = v_ref;
            item.psi.u = u_ref;
            item.psi.null_branch = drop;
            item.prev_chunk = target.prev_chunk_id >= 0 ? tape.constant(history[target.prev_chunk_id])
                                                        : bp["dit.start_chunk"];
            item.noisy_chunk = tape.constant(forward_diffuse(x0, t_diff, eps));
            item.time = t_diff;
            items.push_back(std::move(item));
            ++out.chunks;
            if (drop) ++out.null_conditions;
        }
        auto preds = dit_predict_batch(tape, bp, c.model, items);
        auto l_diff = tape.squared_error_sum(preds, stacked_targets, stacked_targets.rows());

        auto total = tape.add(l_diff, l_stop);
        typename Tape<float>::Ref l_align{};
        if (c.align_target != AlignTarget::None) {
            const auto dims = model.tam_dims();
            auto projected = tam(tape, bp, dec.h, dims.factor, dims.d_out);
            auto align = align_loss(tape, projected, prep.align_target, dims.factor);
            l_align = align.loss;
            total = tape.add(total, l_align);
        }

        tape.backward(total);
        grads.add_from(tape, bp);

        out.loss_diff = tape.val(l_diff)(0, 0);
        out.loss_stop = tape.val(l_stop)(0, 0);
        out.loss_align = l_align.valid() ? tape.val(l_align)(0, 0) : 0.0;
        out.total = out.loss_diff + out.loss_stop + out.loss_align;
        return out;
    }

private:
    void init_optimizer_state() {
        state_.adam_m.clear();
        state_.adam_v.clear();
        for (const auto& e : state_.model.params.entries) {
            state_.adam_m.emplace_back(e.value.rows(), e.value.cols());
            state_.adam_v.emplace_back(e.value.rows(), e.value.cols());
        }
    }

    void prepare_items() {
        prepared_train_ = prepare_split(corpus_.train);
        prepared_eval_ = prepare_split(corpus_.eval);
        speaker_items_.assign(corpus_.spec.num_speakers, {});
        for (size_t i = 0; i < corpus_.train.size(); ++i)
            speaker_items_[corpus_.train[i].speaker].push_back(static_cast<int>(i));
        for (const auto& items : speaker_items_)
            if (items.empty()) throw std::invalid_argument("Trainer: a speaker has no utterances");
    }

    std::vector<PreparedItem> prepare_split(const std::vector<CorpusItem>& items) {
        const auto& c = state_.config;
        std::vector<PreparedItem> out(items.size());
        parallel_for(static_cast<int>(items.size()), c.num_threads, [&](int i) {
            const CorpusItem& item = items[i];
            PreparedItem& p = out[i];
            p.tokens = state_.model.tokenizer.encode(item.text);
            p.mel_norm = state_.model.norm.normalize(item.mel);
            const int N = c.model.chunk_frames;
            const int n_chunks = p.mel_norm.rows() / N;
            p.chunks.reserve(n_chunks);
            for (int ci = 0; ci < n_chunks; ++ci) {
                Matrix<float> chunk(N, p.mel_norm.cols());
                for (int f = 0; f < N; ++f)
                    std::copy(p.mel_norm.row(ci * N + f), p.mel_norm.row(ci * N + f) + chunk.cols(),
                              chunk.row(f));
                p.chunks.push_back(std::move(chunk));
            }
            if (c.align_target == AlignTarget::Asr) {
                const Matrix<float> asr_mel = expand_mel_for_encoder(item.mel, c.model.asr_n_mels);
                p.align_target = state_.asr_encoder.encode(asr_mel);
            } else if (c.align_target == AlignTarget::Mel) {
                p.align_target = p.mel_norm;
            }
        });
        return out;
    }

    void adamw_update(const GradBuffer<float>& grads, double lr) {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const int64_t t = state_.step + 1;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
        auto& entries = state_.model.params.entries;
        for (size_t e = 0; e < entries.size(); ++e) {
            if (!entries[e].trainable) continue;
            float* theta = entries[e].value.data();
            float* m = state_.adam_m[e].data();
            float* v = state_.adam_v[e].data();
            const float* g = grads.grads[e].data();
            const bool decay = entries[e].weight_decay;
            for (size_t i = 0; i < entries[e].value.size(); ++i) {
                m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
                v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * static_cast<double>(g[i]) * g[i]);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + eps);
                if (decay) upd += lr * state_.config.weight_decay * theta[i];
                theta[i] = static_cast<float>(theta[i] - upd);
            }
        }
    }

    const Corpus& corpus_;
    TrainState state_;
    std::vector<PreparedItem> prepared_train_, prepared_eval_;
    std::vector<std::vector<int>> speaker_items_;
};

}  // namespace melatts
