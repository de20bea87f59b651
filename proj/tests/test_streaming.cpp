#include <catch2/catch_amalgamated.hpp>

#include "melatts/streaming.hpp"

using namespace melatts;

namespace {

TtsModel<float> tiny_model(uint64_t seed = 5) {
    TtsModel<float> model;
    model.cfg = ModelConfig::tiny();
    model.tokenizer = Tokenizer::for_classes(6);
    model.cfg.vocab_size = model.tokenizer.vocab_size();
    Rng rng(seed);
    model.init(rng);
    model.norm = MelNorm{0.0f, 1.0f};
    return model;
}

// compact layout signature: T = text, S = turn-of-speech, C = chunk,
// F = filling (prefix Utt/Spk rendered as U, V)
std::string signature(const DecoderSequence& seq) {
    std::string s;
    for (const auto& e : seq.elems) {
        switch (e.kind) {
            case ElemKind::Utt: s += 'U'; break;
            case ElemKind::Spk: s += 'V'; break;
            case ElemKind::Text: s += 'T'; break;
            case ElemKind::Chunk: s += e.prompt ? 'P' : 'C'; break;
            case ElemKind::TurnOfSpeech: s += 'S'; break;
            case ElemKind::Filling: s += 'F'; break;
        }
    }
    return s;
}

std::vector<int> tokens(int n) {
    std::vector<int> t(n, Tokenizer::kNumSpecials);
    return t;
}

GenPrompt random_prompt(const TtsModel<float>& model, Rng& rng, int prompt_chunks = 0) {
    GenPrompt p;
    p.u = gaussian_matrix<float>(1, model.cfg.d_utt, rng);
    p.v = gaussian_matrix<float>(1, model.cfg.d_spk, rng);
    for (int i = 0; i < prompt_chunks; ++i)
        p.prompt_chunks.push_back(gaussian_matrix<float>(model.cfg.chunk_frames, model.cfg.n_mels, rng));
    return p;
}

}  // namespace

TEST_CASE("interleave golden layouts", "[streaming]") {
    const InterleavePolicy policy;  // 4:3

    // text exactly fills one block: turn-of-speech right after the text,
    // then the chunks
    CHECK(signature(interleave(tokens(4), 3, policy)) == "UVTTTTSCCC");
    // two full blocks
    CHECK(signature(interleave(tokens(8), 6, policy)) == "UVTTTTCCCTTTTSCCC");
    // text exhausted mid-block: unused text slots skipped
    CHECK(signature(interleave(tokens(2), 3, policy)) == "UVTTSCCC");
}

TEST_CASE("interleave edge layouts", "[streaming]") {
    const InterleavePolicy policy;  // 4:3

    // chunks exhausted mid-block while text remains: filling pads the block,
    // remaining text appended, exactly one turn-of-speech at the end
    CHECK(signature(interleave(tokens(12), 5, policy)) == "UVTTTTCCCTTTTCCFTTTTS");
    // chunks exhausted exactly at a block boundary
    CHECK(signature(interleave(tokens(12), 3, policy)) == "UVTTTTCCCTTTTTTTTS");
    // empty text: immediate turn-of-speech
    CHECK(signature(interleave({}, 3, policy)) == "UVSCCC");
    // prompt chunks precede the first text block
    CHECK(signature(interleave(tokens(4), 3, policy, 2)) == "UVPPTTTTSCCC");

    CHECK_THROWS_AS(interleave(tokens(4), 0, policy), std::invalid_argument);
    CHECK_THROWS_AS(interleave(tokens(4), 3, InterleavePolicy{0, 3}), std::invalid_argument);
}

TEST_CASE("interleave determinism and single turn-of-speech invariant", "[streaming]") {
    Rng rng(3);
    const InterleavePolicy policy{4, 3};
    for (int trial = 0; trial < 200; ++trial) {
        const int n_text = rng.uniform_int(0, 14);
        const int n_chunks = rng.uniform_int(1, 12);
        const auto a = interleave(tokens(n_text), n_chunks, policy);
        const auto b = interleave(tokens(n_text), n_chunks, policy);
        CHECK(signature(a) == signature(b));
        a.validate();

        int tos = 0, fill_masked = 0;
        for (const auto& e : a.elems) tos += e.kind == ElemKind::TurnOfSpeech;
        CHECK(tos == 1);

        // filling positions are never loss positions
        const auto mask = loss_mask(a);
        for (int i = 0; i < a.length(); ++i)
            if (a.elems[i].kind == ElemKind::Filling) fill_masked += mask[i];
        CHECK(fill_masked == 0);
    }
}

TEST_CASE("loss mask popcount equals chunk count in both layouts", "[streaming]") {
    Rng rng(5);
    const InterleavePolicy policy{4, 3};
    for (int trial = 0; trial < 100; ++trial) {
        const int n_text = rng.uniform_int(1, 12);
        const int n_chunks = rng.uniform_int(1, 10);
        const auto inter = interleave(tokens(n_text), n_chunks, policy);
        const auto off = offline_layout(tokens(n_text), n_chunks);
        auto popcount = [](const std::vector<uint8_t>& m) {
            int c = 0;
            for (auto b : m) c += b;
            return c;
        };
        CHECK(popcount(loss_mask(inter)) == n_chunks);
        CHECK(popcount(loss_mask(off)) == n_chunks);
    }
}

TEST_CASE("streaming equals batch interleaved generation bit-for-bit", "[streaming]") {
    // holds for arbitrary (untrained) parameters; the stop head fires or the
    // runaway guard caps generation
    auto model = tiny_model(17);
    Rng rng(4);
    const auto prompt = random_prompt(model, rng, 1);

    for (int n_text : {2, 4, 7, 8, 11}) {
        GenerationOptions opt;
        opt.sampler.nfe = 2;
        opt.seed = 1000 + n_text;
        const auto text = tokens(n_text);

        BufferedTokenSource source(text);
        const auto streamed = streaming_generate(model, source, prompt, opt);
        const auto batch = generate_interleaved(model, text, prompt, opt);

        REQUIRE(streamed.chunks.size() == batch.chunks.size());
        for (size_t i = 0; i < streamed.chunks.size(); ++i)
            REQUIRE(max_abs_diff(streamed.chunks[i], batch.chunks[i]) == 0.0f);
        CHECK(streamed.truncated == batch.truncated);
        CHECK(streamed.stop_step == batch.stop_step);
    }
}

TEST_CASE("streaming is insensitive to token arrival timing", "[streaming]") {
    // a source that drips tokens one at a time must match the buffered one
    class DripSource : public TokenSource {
    public:
        explicit DripSource(std::vector<int> toks) : toks_(std::move(toks)) {}
        std::optional<int> next() override {
            if (pos_ >= toks_.size()) return std::nullopt;
            return toks_[pos_++];
        }

    private:
        std::vector<int> toks_;
        size_t pos_ = 0;
    };

    auto model = tiny_model(23);
    Rng rng(6);
    const auto prompt = random_prompt(model, rng);
    const auto text = tokens(6);
    GenerationOptions opt;
    opt.sampler.nfe = 2;
    opt.seed = 99;

    DripSource drip(text);
    BufferedTokenSource buffered(text);
    const auto a = streaming_generate(model, drip, prompt, opt);
    const auto b = streaming_generate(model, buffered, prompt, opt);
    REQUIRE(a.chunks.size() == b.chunks.size());
    for (size_t i = 0; i < a.chunks.size(); ++i) REQUIRE(max_abs_diff(a.chunks[i], b.chunks[i]) == 0.0f);
}

TEST_CASE("latency contract from the event log", "[streaming]") {
    // no chunk in (1-based) block k may appear before n*k tokens (or the end
    // marker) were consumed
    auto model = tiny_model(31);
    Rng rng(8);
    const auto prompt = random_prompt(model, rng);
    GenerationOptions opt;
    opt.sampler.nfe = 1;
    opt.seed = 3;

    const auto text = tokens(11);
    BufferedTokenSource source(text);
    const auto result = streaming_generate(model, source, prompt, opt);

    int tokens_seen = 0;
    bool tos_seen = false;
    for (const auto& ev : result.events) {
        if (ev.kind == StreamEvent::Kind::TokenReceived) ++tokens_seen;
        if (ev.kind == StreamEvent::Kind::TurnOfSpeech) tos_seen = true;
        if (ev.kind == StreamEvent::Kind::ChunkEmitted) {
            const int block = ev.index / opt.policy.chunks_per_block;  // 0-based block
            const int required = (block + 1) * opt.policy.text_per_block;
            CHECK((tos_seen || tokens_seen >= required));
        }
    }
    // every generated chunk consumed exactly one conditioning step
    int emitted = 0;
    for (const auto& ev : result.events) emitted += ev.kind == StreamEvent::Kind::ChunkEmitted;
    CHECK(emitted == static_cast<int>(result.chunks.size()));
    // events are logically ordered
    for (size_t i = 1; i < result.events.size(); ++i)
        CHECK(result.events[i].logical == result.events[i - 1].logical + 1);
}

TEST_CASE("empty text emits the turn-of-speech immediately and still speaks", "[streaming]") {
    auto model = tiny_model(41);
    Rng rng(9);
    const auto prompt = random_prompt(model, rng, 2);
    GenerationOptions opt;
    opt.sampler.nfe = 1;
    opt.seed = 12;

    BufferedTokenSource source({});
    const auto result = streaming_generate(model, source, prompt, opt);
    REQUIRE_FALSE(result.events.empty());
    CHECK(result.events[0].kind == StreamEvent::Kind::TurnOfSpeech);
    CHECK(result.chunks.size() >= 1);
}

TEST_CASE("runaway guard truncates generation", "[streaming]") {
    auto model = tiny_model(43);
    // force continue: stop head biased hard negative
    model.params.at("stop.w").set_zero();
    model.params.at("stop.b")(0, 0) = -50.0f;
    Rng rng(10);
    const auto prompt = random_prompt(model, rng);
    GenerationOptions opt;
    opt.sampler.nfe = 1;
    opt.seed = 5;
    const auto text = tokens(2);
    const auto result = generate_interleaved(model, text, prompt, opt);
    CHECK(result.truncated);
    CHECK(static_cast<int>(result.chunks.size()) == runaway_cap(2, opt.max_chunks_extra));
    bool has_truncated_event = false;
    for (const auto& ev : result.events) has_truncated_event |= ev.kind == StreamEvent::Kind::Truncated;
    CHECK(has_truncated_event);
}

TEST_CASE("mixed batch layout fractions", "[streaming]") {
    Rng zero(1), one(2), half(3);
    for (int i = 0; i < 100; ++i) {
        CHECK(mixed_batch_mode(zero, 0.0) == LayoutMode::Offline);
        CHECK(mixed_batch_mode(one, 1.0) == LayoutMode::Interleaved);
    }
    const int n = 10000;
    int interleaved = 0;
    for (int i = 0; i < n; ++i) interleaved += mixed_batch_mode(half, 0.5) == LayoutMode::Interleaved;
    const double sigma = std::sqrt(0.25 / n);
    CHECK(std::abs(interleaved / static_cast<double>(n) - 0.5) < 3 * sigma);
    CHECK_THROWS_AS(mixed_batch_mode(half, 1.5), std::invalid_argument);
}
