#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "melatts/core/container.hpp"
#include "melatts/pipeline/train.hpp"

namespace melatts {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointSchema = 1;

// Single-file checkpoint: JSON header (config, vocabulary, normalization
// stats, step, parameter manifest) followed by float32 arrays in manifest
// order: model parameters, frozen encoder parameters, then both Adam moment
// sets. Written atomically.
inline void save_checkpoint(const TrainState& state, const std::string& path) {
    json manifest = json::array();
    size_t total = 0;
    auto describe = [&](const ParamStore<float>& store, const std::string& which) {
        for (const auto& e : store.entries) {
            manifest.push_back(json{{"name", e.name},
                                    {"rows", e.value.rows()},
                                    {"cols", e.value.cols()},
                                    {"trainable", e.trainable},
                                    {"store", which}});
            total += e.value.size();
        }
    };
    describe(state.model.params, "model");
    describe(state.asr_encoder.params, "asr");

    size_t moments = 0;
    for (const auto& m : state.adam_m) moments += m.size();

    json header{{"kind", "checkpoint"},
                {"schema", kCheckpointSchema},
                {"config", state.config.to_json()},
                {"vocab", state.model.tokenizer.to_json()},
                {"mel_norm", state.model.norm.to_json()},
                {"step", state.step},
                {"params", manifest}};

    std::vector<float> payload;
    payload.reserve(total + 2 * moments);
    auto push = [&](const Matrix<float>& m) { payload.insert(payload.end(), m.data(), m.data() + m.size()); };
    for (const auto& e : state.model.params.entries) push(e.value);
    for (const auto& e : state.asr_encoder.params.entries) push(e.value);
    for (const auto& m : state.adam_m) push(m);
    for (const auto& v : state.adam_v) push(v);

    write_container(path, header, payload.data(), payload.size());
}

inline TrainState load_checkpoint(const std::string& path) {
    ContainerData data;
    try {
        data = read_container(path);
    } catch (const std::exception& e) {
        throw CheckpointError(e.what());
    }
    const json& header = data.header;
    if (header.value("kind", "") != "checkpoint") throw CheckpointError("not a checkpoint: " + path);
    if (header.value("schema", -1) != kCheckpointSchema)
        throw CheckpointError("unsupported checkpoint schema " + std::to_string(header.value("schema", -1)) +
                              " (expected " + std::to_string(kCheckpointSchema) + "): " + path);

    TrainState state;
    try {
        state.config = TrainConfig::from_json(header.at("config"));
        state.model.tokenizer = Tokenizer::from_json(header.at("vocab"));
        state.model.norm = MelNorm::from_json(header.at("mel_norm"));
        state.step = header.at("step");
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (state.config.model.vocab_size != state.model.tokenizer.vocab_size())
        throw CheckpointError("checkpoint vocabulary size disagrees with its model config");

    // Rebuild parameter registration exactly as a fresh run would, then
    // overwrite the values from the payload.
    state.model.cfg = state.config.model;
    state.model.use_utterance_embedding = state.config.use_utterance_embedding;
    state.model.align_target = state.config.align_target;
    Rng init_rng(derive_seed(state.config.seed, 0x1417));
    try {
        state.model.init(init_rng);
        state.asr_encoder.init(state.config.model, state.config.surrogate_seed);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint config rejected: ") + e.what());
    }

    const json& manifest = header.at("params");
    const size_t expected_entries = state.model.params.entries.size() + state.asr_encoder.params.entries.size();
    if (manifest.size() != expected_entries)
        throw CheckpointError("checkpoint manifest does not match the rebuilt parameter set");

    size_t offset = 0;
    auto restore = [&](ParamStore<float>& store, const std::string& which, size_t manifest_base) {
        for (size_t i = 0; i < store.entries.size(); ++i) {
            auto& e = store.entries[i];
            const json& m = manifest.at(manifest_base + i);
            if (m.at("name") != e.name || m.at("rows") != e.value.rows() || m.at("cols") != e.value.cols() ||
                m.at("store") != which)
                throw CheckpointError("checkpoint manifest mismatch at " + e.name);
            if (offset + e.value.size() > data.payload.size())
                throw CheckpointError("checkpoint payload truncated at " + e.name);
            std::copy(data.payload.begin() + offset, data.payload.begin() + offset + e.value.size(),
                      e.value.data());
            offset += e.value.size();
        }
    };
    restore(state.model.params, "model", 0);
    restore(state.asr_encoder.params, "asr", state.model.params.entries.size());

    state.adam_m.clear();
    state.adam_v.clear();
    for (auto* moments : {&state.adam_m, &state.adam_v}) {
        for (const auto& e : state.model.params.entries) {
            Matrix<float> m(e.value.rows(), e.value.cols());
            if (offset + m.size() > data.payload.size())
                throw CheckpointError("checkpoint payload truncated in optimizer state");
            std::copy(data.payload.begin() + offset, data.payload.begin() + offset + m.size(), m.data());
            offset += m.size();
            moments->push_back(std::move(m));
        }
    }
    if (offset != data.payload.size()) throw CheckpointError("checkpoint payload has trailing bytes");
    return state;
}

}  // namespace melatts
