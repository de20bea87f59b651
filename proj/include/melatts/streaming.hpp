#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "melatts/ar_core.hpp"
#include "melatts/diffusion.hpp"
#include "melatts/sequence.hpp"

namespace melatts {

struct StreamEvent {
    enum class Kind { TokenReceived, ChunkEmitted, TurnOfSpeech, Stop, Truncated };
    Kind kind;
    int index = 0;    // token ordinal or chunk ordinal
    int logical = 0;  // global event order
    double wall_ms = 0.0;

    static const char* name(Kind k) {
        switch (k) {
            case Kind::TokenReceived: return "token_received";
            case Kind::ChunkEmitted: return "chunk_emitted";
            case Kind::TurnOfSpeech: return "tos";
            case Kind::Stop: return "stop";
            case Kind::Truncated: return "truncated";
        }
        return "?";
    }
};

// Incremental token producer; nullopt is the end marker.
class TokenSource {
public:
    virtual ~TokenSource() = default;
    virtual std::optional<int> next() = 0;
};

class BufferedTokenSource : public TokenSource {
public:
    explicit BufferedTokenSource(std::vector<int> tokens) : tokens_(std::move(tokens)) {}
    std::optional<int> next() override {
        if (pos_ >= tokens_.size()) return std::nullopt;
        return tokens_[pos_++];
    }

private:
    std::vector<int> tokens_;
    size_t pos_ = 0;
};

// Incremental consumer of generated chunks (raw, denormalized mel frames).
class ChunkSink {
public:
    virtual ~ChunkSink() = default;
    virtual void on_chunk(int index, const Matrix<float>& raw_mel_chunk) = 0;
    virtual void on_event(const StreamEvent&) {}
};

class CollectSink : public ChunkSink {
public:
    std::vector<Matrix<float>> chunks;
    void on_chunk(int, const Matrix<float>& raw) override { chunks.push_back(raw); }
};

// Inference-time conditioning derived from prompt speech.
struct GenPrompt {
    Matrix<float> u;                          // [1, d_utt]
    Matrix<float> v;                          // [1, d_spk]
    std::vector<Matrix<float>> prompt_chunks; // normalized [N, n_mels]
};

// Both embeddings come from the prompt: v through the frozen speaker
// surrogate, u through the utterance encoder (or the learned constant), and
// the last few prompt chunks are kept as acoustic history.
inline GenPrompt make_prompt(const TtsModel<float>& model, const MelSpectrogram& prompt_mel_raw,
                             int max_prompt_chunks) {
    GenPrompt prompt;
    prompt.v = model.speaker_embedding(prompt_mel_raw.frames);
    Matrix<float> normed = model.norm.normalize(prompt_mel_raw.frames);
    if (model.use_utterance_embedding) {
        const int L = std::min(normed.rows(), model.cfg.utt_max_frames);
        Matrix<float> seg(L, normed.cols());
        for (int r = 0; r < L; ++r) std::copy(normed.row(r), normed.row(r) + normed.cols(), seg.row(r));
        Tape<float> t;
        auto bp = bind_params(t, model.params, /*for_inference=*/true);
        prompt.u = t.val(model.encode_utterance(t, bp, seg));
    } else {
        prompt.u = model.params.at("utt.const_u");
    }
    if (max_prompt_chunks > 0) {
        MelSpectrogram normed_mel;
        normed_mel.frames = normed;
        normed_mel.config = prompt_mel_raw.config;
        normed_mel.frame_rate = prompt_mel_raw.frame_rate;
        auto chunks = chunk_mel(normed_mel, model.cfg.chunk_frames);
        // keep only whole chunks, most recent first
        while (!chunks.empty() && chunks.back().valid_frames < model.cfg.chunk_frames) chunks.pop_back();
        const int keep = std::min<int>(max_prompt_chunks, static_cast<int>(chunks.size()));
        for (int i = static_cast<int>(chunks.size()) - keep; i < static_cast<int>(chunks.size()); ++i)
            prompt.prompt_chunks.push_back(chunks[i].frames);
    }
    return prompt;
}

// Incremental generation state shared by the offline, batch-interleaved and
// streaming entry points. The decoder prefix is re-run in full at every
// chunk step, so the hidden states depend only on the element sequence, not
// on arrival timing.
class GenSession {
public:
    GenSession(const TtsModel<float>& model, const GenPrompt& prompt, const SamplerConfig& sampler,
               uint64_t seed)
        : model_(model), sampler_(sampler), seed_(seed) {
        bp_ = bind_params(tape_, model.params, /*for_inference=*/true);
        base_mark_ = tape_.num_nodes();
        elems_.push_back({ElemKind::Utt});
        elems_.push_back({ElemKind::Spk});
        u_ = prompt.u;
        v_ = prompt.v;
        for (const auto& c : prompt.prompt_chunks) {
            SeqElem e{ElemKind::Chunk};
            e.chunk = static_cast<int>(chunks_.size());
            e.prompt = true;
            push_chunk_elem(e, c);
        }
    }

    void push_text(int token) { elems_.push_back({ElemKind::Text, token}); }
    void push_tos() { elems_.push_back({ElemKind::TurnOfSpeech, Tokenizer::kTurnOfSpeech}); }

    int chunks_generated() const { return generated_; }
    double last_stop_probability() const { return last_stop_prob_; }

    // One autoregressive step: run the decoder over the current prefix, read
    // the conditioning pair, denoise a chunk, feed it back as history.
    // Returns the normalized chunk. The session tape is reused and pruned
    // after every step.
    Matrix<float> generate_chunk() {
        DecoderSequence seq;
        seq.elems = elems_;
        seq.num_chunks = static_cast<int>(chunks_.size());
        // no targets needed for the prefix pass; read hidden rows directly
        const size_t mark = tape_.num_nodes();
        auto out = model_.decoder_forward(tape_, bp_, with_dummy_tos(seq), tape_.constant(u_), v_, chunks_);

        const int last = static_cast<int>(elems_.size()) - 1;
        const auto& hidden = tape_.val(out.hidden);
        Matrix<float> h_cur = row_of(hidden, last);
        Matrix<float> h_prev = prev_chunk_elem_pos_ >= 0 ? row_of(hidden, prev_chunk_elem_pos_ - 1)
                                                         : model_.params.at("dit.start_h");
        tape_.truncate(mark);
        const Matrix<float>& prev_chunk =
            prev_chunk_id_ >= 0 ? chunks_[prev_chunk_id_] : model_.params.at("dit.start_chunk");

        PsiValues psi{h_prev, h_cur, v_, u_};
        SamplerConfig chunk_sampler = sampler_;
        chunk_sampler.seed = derive_seed(seed_, 0xC0DE, static_cast<uint64_t>(generated_));
        Matrix<float> chunk = sample_chunk_on_tape(tape_, bp_, model_.cfg, psi, prev_chunk, chunk_sampler);

        last_stop_prob_ = model_.stop_probability(h_cur);
        SeqElem e{ElemKind::Chunk};
        e.chunk = static_cast<int>(chunks_.size());
        push_chunk_elem(e, chunk);
        ++generated_;
        return chunk;
    }

private:
    // decoder_forward validates a full sequence; the growing prefix may not
    // have its turn-of-speech yet, so validation runs on a patched copy.
    DecoderSequence with_dummy_tos(DecoderSequence seq) const {
        bool has_tos = false;
        for (const auto& e : seq.elems) has_tos = has_tos || e.kind == ElemKind::TurnOfSpeech;
        if (!has_tos) seq.elems.push_back({ElemKind::TurnOfSpeech, Tokenizer::kTurnOfSpeech});
        return seq;
    }

    static Matrix<float> row_of(const Matrix<float>& m, int r) {
        Matrix<float> out(1, m.cols());
        std::copy(m.row(r), m.row(r) + m.cols(), out.row(0));
        return out;
    }

    void push_chunk_elem(const SeqElem& e, const Matrix<float>& frames) {
        prev_chunk_elem_pos_ = static_cast<int>(elems_.size());
        prev_chunk_id_ = e.chunk;
        elems_.push_back(e);
        chunks_.push_back(frames);
    }

    const TtsModel<float>& model_;
    SamplerConfig sampler_;
    uint64_t seed_;
    Tape<float> tape_;
    BoundParams<float> bp_;
    size_t base_mark_ = 0;
    std::vector<SeqElem> elems_;
    std::vector<Matrix<float>> chunks_;
    Matrix<float> u_, v_;
    int prev_chunk_elem_pos_ = -1;
    int prev_chunk_id_ = -1;
    int generated_ = 0;
    double last_stop_prob_ = 0.0;
};

struct GenerationOptions {
    InterleavePolicy policy;
    SamplerConfig sampler;
    uint64_t seed = 0;
    double stop_threshold = 0.5;
    int max_prompt_chunks = 3;
    // runaway guard: cap = 4 * max(1, text tokens) + extra
    int max_chunks_extra = 4;
    // optional additional hard bound on generated chunks (0 = none); used by
    // evaluation to bound early-training runaways
    int hard_cap = 0;
};

struct GenerationResult {
    std::vector<Matrix<float>> chunks;  // normalized
    std::vector<StreamEvent> events;
    bool truncated = false;
    int stop_step = -1;  // chunk ordinal at which the stop head fired
};

inline int runaway_cap(int text_tokens, int extra) { return 4 * std::max(1, text_tokens) + extra; }

namespace detail {

// Shared event/emission plumbing for the two interleaved drivers.
struct GenDriver {
    const TtsModel<float>& model;
    GenSession session;
    const GenerationOptions& opt;
    ChunkSink* sink;
    GenerationResult result;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    int logical = 0;
    int tokens_received = 0;
    bool done = false;

    GenDriver(const TtsModel<float>& m, const GenPrompt& prompt, const GenerationOptions& o, ChunkSink* s)
        : model(m), session(m, prompt, o.sampler, o.seed), opt(o), sink(s) {}

    void event(StreamEvent::Kind kind, int index) {
        StreamEvent ev;
        ev.kind = kind;
        ev.index = index;
        ev.logical = logical++;
        ev.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.events.push_back(ev);
        if (sink) sink->on_event(ev);
    }

    void push_text(int tok) {
        session.push_text(tok);
        event(StreamEvent::Kind::TokenReceived, tokens_received++);
    }
    void push_tos() {
        session.push_tos();
        event(StreamEvent::Kind::TurnOfSpeech, tokens_received);
    }

    void emit_chunk() {
        Matrix<float> chunk = session.generate_chunk();
        const int ordinal = static_cast<int>(result.chunks.size());
        result.chunks.push_back(chunk);
        if (sink) sink->on_chunk(ordinal, model.norm.denormalize(chunk));
        event(StreamEvent::Kind::ChunkEmitted, ordinal);
        if (session.last_stop_probability() > opt.stop_threshold) {
            result.stop_step = ordinal;
            event(StreamEvent::Kind::Stop, ordinal);
            done = true;
        } else {
            int cap = runaway_cap(tokens_received, opt.max_chunks_extra);
            if (opt.hard_cap > 0) cap = std::min(cap, opt.hard_cap);
            if (static_cast<int>(result.chunks.size()) >= cap) {
                result.truncated = true;
                event(StreamEvent::Kind::Truncated, ordinal);
                done = true;
            }
        }
    }

    void burst() {
        for (int i = 0; i < opt.policy.chunks_per_block && !done; ++i) emit_chunk();
    }
    void continuation() {
        while (!done) emit_chunk();
    }
};

}  // namespace detail

// Streaming protocol: a completed text block's m chunks are generated as
// soon as the stream shows more text follows; when the end marker follows
// instead, the turn-of-speech is placed directly after the final text token
// (the training layout) and all remaining chunks run as continuation until
// the stop head fires or the runaway guard trips. With a fully-buffered
// source the emitted chunks equal batch interleaved-mode generation
// bit-for-bit.
inline GenerationResult streaming_generate(const TtsModel<float>& model, TokenSource& source,
                                           const GenPrompt& prompt, const GenerationOptions& opt,
                                           ChunkSink* sink = nullptr) {
    opt.policy.validate();
    detail::GenDriver d(model, prompt, opt, sink);

    std::optional<int> pending;
    bool tos = false;
    int block_tokens = 0;
    while (!tos && !d.done) {
        std::optional<int> tok = pending.has_value() ? std::exchange(pending, std::nullopt) : source.next();
        if (!tok.has_value()) {
            d.push_tos();
            tos = true;
            break;
        }
        d.push_text(*tok);
        if (++block_tokens == opt.policy.text_per_block) {
            block_tokens = 0;
            pending = source.next();
            if (pending.has_value()) {
                d.burst();
            } else {
                d.push_tos();
                tos = true;
            }
        }
    }
    if (tos) d.continuation();
    return d.result;
}

// Batch interleaved-mode inference: the full text is known up front, so the
// schedule is laid out directly; must emit the same chunks as
// streaming_generate over a buffered source.
inline GenerationResult generate_interleaved(const TtsModel<float>& model, const std::vector<int>& text,
                                             const GenPrompt& prompt, const GenerationOptions& opt,
                                             ChunkSink* sink = nullptr) {
    opt.policy.validate();
    detail::GenDriver d(model, prompt, opt, sink);

    size_t pos = 0;
    while (pos < text.size() && !d.done) {
        const int k = std::min<int>(opt.policy.text_per_block, static_cast<int>(text.size() - pos));
        for (int i = 0; i < k; ++i) d.push_text(text[pos++]);
        if (pos == text.size()) break;
        d.burst();
    }
    if (!d.done) {
        d.push_tos();
        d.continuation();
    }
    return d.result;
}

// Offline layout inference: all text, then the turn-of-speech, then chunks
// until stop.
inline GenerationResult generate_offline(const TtsModel<float>& model, const std::vector<int>& text,
                                         const GenPrompt& prompt, const GenerationOptions& opt) {
    GenSession session(model, prompt, opt.sampler, opt.seed);
    GenerationResult result;
    for (int tok : text) session.push_text(tok);
    session.push_tos();
    int cap = runaway_cap(static_cast<int>(text.size()), opt.max_chunks_extra);
    if (opt.hard_cap > 0) cap = std::min(cap, opt.hard_cap);
    while (true) {
        result.chunks.push_back(session.generate_chunk());
        if (session.last_stop_probability() > opt.stop_threshold) {
            result.stop_step = static_cast<int>(result.chunks.size()) - 1;
            break;
        }
        if (static_cast<int>(result.chunks.size()) >= cap) {
            result.truncated = true;
            break;
        }
    }
    return result;
}

// Per-example layout choice for mixed interleaved / offline training.
inline LayoutMode mixed_batch_mode(Rng& rng, double interleave_fraction) {
    if (interleave_fraction < 0.0 || interleave_fraction > 1.0)
        throw std::invalid_argument("mixed_batch_mode: fraction must lie in [0, 1]");
    return rng.bernoulli(interleave_fraction) ? LayoutMode::Interleaved : LayoutMode::Offline;
}

}  // namespace melatts
