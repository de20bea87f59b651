#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "melatts/tokenizer.hpp"

namespace melatts {

enum class ElemKind : uint8_t { Utt, Spk, Text, Chunk, TurnOfSpeech, Filling };

struct SeqElem {
    ElemKind kind;
    int token = -1;  // vocab id for Text; TOS/Filling use their reserved ids
    int chunk = -1;  // index into the chunk array for Chunk elements
    bool prompt = false;  // chunk is history only, never a prediction target
};

// One entry per predicted chunk, in generation order. h_pos is the position
// whose hidden state conditions the chunk (the element immediately before
// it); prev_* describe the preceding chunk in the sequence, or -1 when the
// learned start vector / start chunk stands in.
struct ChunkTarget {
    int chunk_id = -1;
    int h_pos = -1;
    int prev_h_pos = -1;
    int prev_chunk_id = -1;
    int stop_label = 0;  // 1 iff this is the utterance's final chunk
};

// Position-typed decoder input. Exactly one Utt and one Spk element lead the
// sequence; prompt chunks (history) may precede the text.
struct DecoderSequence {
    std::vector<SeqElem> elems;
    std::vector<ChunkTarget> targets;
    int num_chunks = 0;  // prompt + target chunks

    int length() const { return static_cast<int>(elems.size()); }
    int num_targets() const { return static_cast<int>(targets.size()); }

    // True exactly at positions immediately preceding a target chunk;
    // filling and text positions are false.
    std::vector<uint8_t> loss_mask() const {
        std::vector<uint8_t> mask(elems.size(), 0);
        for (const auto& t : targets) mask[t.h_pos] = 1;
        return mask;
    }

    void validate() const {
        if (elems.size() < 2 || elems[0].kind != ElemKind::Utt || elems[1].kind != ElemKind::Spk)
            throw std::invalid_argument("DecoderSequence: must start with [Utt, Spk]");
        int tos = 0, chunks = 0;
        for (size_t i = 2; i < elems.size(); ++i) {
            const auto& e = elems[i];
            if (e.kind == ElemKind::Utt || e.kind == ElemKind::Spk)
                throw std::invalid_argument("DecoderSequence: duplicate Utt/Spk element");
            if (e.kind == ElemKind::TurnOfSpeech) ++tos;
            if (e.kind == ElemKind::Chunk) ++chunks;
        }
        if (tos != 1) throw std::invalid_argument("DecoderSequence: exactly one turn-of-speech required");
        if (chunks != num_chunks) throw std::invalid_argument("DecoderSequence: chunk count mismatch");
        for (const auto& t : targets) {
            if (t.h_pos < 0 || t.h_pos + 1 >= length() || elems[t.h_pos + 1].kind != ElemKind::Chunk ||
                elems[t.h_pos + 1].chunk != t.chunk_id)
                throw std::invalid_argument("DecoderSequence: target does not follow its h position");
        }
    }
};

struct InterleavePolicy {
    int text_per_block = 4;   // n
    int chunks_per_block = 3; // m

    void validate() const {
        if (text_per_block < 1 || chunks_per_block < 1)
            throw std::invalid_argument("InterleavePolicy: n and m must be >= 1");
    }
};

enum class LayoutMode { Offline, Interleaved };

namespace detail {

class SequenceBuilder {
public:
    explicit SequenceBuilder(int num_prompt_chunks) {
        seq_.elems.push_back({ElemKind::Utt});
        seq_.elems.push_back({ElemKind::Spk});
        for (int i = 0; i < num_prompt_chunks; ++i) {
            SeqElem e{ElemKind::Chunk};
            e.chunk = next_chunk_id_++;
            e.prompt = true;
            add_chunk_elem(e);
        }
    }

    void text(int token) { seq_.elems.push_back({ElemKind::Text, token}); }
    void turn_of_speech() { seq_.elems.push_back({ElemKind::TurnOfSpeech, Tokenizer::kTurnOfSpeech}); }
    void filling() { seq_.elems.push_back({ElemKind::Filling, Tokenizer::kFilling}); }

    void target_chunk() {
        SeqElem e{ElemKind::Chunk};
        e.chunk = next_chunk_id_;
        ChunkTarget t;
        t.chunk_id = next_chunk_id_++;
        t.h_pos = static_cast<int>(seq_.elems.size()) - 1;
        t.prev_h_pos = prev_chunk_h_pos_;
        t.prev_chunk_id = prev_chunk_id_;
        seq_.targets.push_back(t);
        add_chunk_elem(e);
    }

    DecoderSequence finish() {
        for (auto& t : seq_.targets) t.stop_label = 0;
        if (!seq_.targets.empty()) seq_.targets.back().stop_label = 1;
        seq_.num_chunks = next_chunk_id_;
        return std::move(seq_);
    }

private:
    void add_chunk_elem(const SeqElem& e) {
        prev_chunk_h_pos_ = static_cast<int>(seq_.elems.size()) - 1;
        prev_chunk_id_ = e.chunk;
        seq_.elems.push_back(e);
    }

    DecoderSequence seq_;
    int next_chunk_id_ = 0;
    int prev_chunk_h_pos_ = -1;
    int prev_chunk_id_ = -1;
};

}  // namespace detail

// Offline layout: [Utt, Spk, prompt chunks..., text..., TurnOfSpeech,
// chunks...].
inline DecoderSequence offline_layout(const std::vector<int>& text, int num_chunks, int num_prompt_chunks = 0) {
    if (num_chunks < 1 && text.empty())
        throw std::invalid_argument("offline_layout: need at least one chunk or text token");
    detail::SequenceBuilder b(num_prompt_chunks);
    for (int tok : text) b.text(tok);
    b.turn_of_speech();
    for (int i = 0; i < num_chunks; ++i) b.target_chunk();
    return b.finish();
}

// Block-interleaved layout. Text and chunks alternate in n:m blocks; the
// turn-of-speech follows the final text token, after which remaining chunks
// run contiguously. If chunks run out mid-block while text remains, the
// block's unused chunk slots become filling tokens and the rest of the text
// is appended afterwards. The layout is a pure function of
// (|text|, num_chunks, n, m).
inline DecoderSequence interleave(const std::vector<int>& text, int num_chunks, const InterleavePolicy& policy,
                                  int num_prompt_chunks = 0) {
    policy.validate();
    if (num_chunks < 1) throw std::invalid_argument("interleave: need at least one chunk");
    detail::SequenceBuilder b(num_prompt_chunks);

    size_t text_pos = 0;
    int chunks_left = num_chunks;
    if (text.empty()) b.turn_of_speech();
    while (text_pos < text.size() || chunks_left > 0) {
        if (text_pos < text.size()) {
            const int k = std::min<int>(policy.text_per_block, static_cast<int>(text.size() - text_pos));
            for (int i = 0; i < k; ++i) b.text(text[text_pos++]);
            if (text_pos == text.size()) b.turn_of_speech();
        }
        if (chunks_left > 0) {
            if (text_pos == text.size()) {
                while (chunks_left-- > 0) b.target_chunk();
                chunks_left = 0;
            } else {
                const int c = std::min(policy.chunks_per_block, chunks_left);
                for (int i = 0; i < c; ++i) b.target_chunk();
                chunks_left -= c;
                if (chunks_left == 0 && c < policy.chunks_per_block) {
                    for (int i = c; i < policy.chunks_per_block; ++i) b.filling();
                }
            }
        } else if (text_pos < text.size()) {
            while (text_pos < text.size()) b.text(text[text_pos++]);
            b.turn_of_speech();
        }
    }
    return b.finish();
}

// Layout entry point used by training; interleaved mode delegates to
// interleave().
inline DecoderSequence build_training_sequence(const std::vector<int>& text, int num_chunks, LayoutMode mode,
                                               const InterleavePolicy& policy = {}, int num_prompt_chunks = 0) {
    if (text.empty() && num_chunks <= 0)
        throw std::invalid_argument("build_training_sequence: empty text and no chunks");
    if (mode == LayoutMode::Offline) return offline_layout(text, num_chunks, num_prompt_chunks);
    return interleave(text, num_chunks, policy, num_prompt_chunks);
}

// Standalone recomputation of the mask for a given sequence; matches
// DecoderSequence::loss_mask by construction.
inline std::vector<uint8_t> loss_mask(const DecoderSequence& seq) { return seq.loss_mask(); }

}  // namespace melatts
