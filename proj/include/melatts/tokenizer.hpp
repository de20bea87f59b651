#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace melatts {

// Character-level tokenizer over a fixed alphabet, plus reserved control
// ids. Id layout: [PAD, TURN_OF_SPEECH, FILLING, alphabet...].
struct Tokenizer {
    static constexpr int kPad = 0;
    static constexpr int kTurnOfSpeech = 1;
    static constexpr int kFilling = 2;
    static constexpr int kNumSpecials = 3;

    std::string alphabet;

    Tokenizer() = default;
    explicit Tokenizer(std::string chars) : alphabet(std::move(chars)) {
        if (alphabet.empty() || alphabet.size() > 61)
            throw std::invalid_argument("Tokenizer: alphabet must have 1..61 symbols");
        for (size_t i = 0; i < alphabet.size(); ++i)
            for (size_t j = i + 1; j < alphabet.size(); ++j)
                if (alphabet[i] == alphabet[j]) throw std::invalid_argument("Tokenizer: duplicate symbol");
    }

    // First K lowercase letters; the toy corpus maps token class k to
    // character 'a' + k.
    static Tokenizer for_classes(int k) {
        if (k < 1 || k > 26) throw std::invalid_argument("Tokenizer: class count must be 1..26");
        std::string chars;
        for (int i = 0; i < k; ++i) chars.push_back(static_cast<char>('a' + i));
        return Tokenizer(chars);
    }

    int vocab_size() const { return kNumSpecials + static_cast<int>(alphabet.size()); }

    int id_of(char c) const {
        const auto pos = alphabet.find(c);
        if (pos == std::string::npos) throw std::invalid_argument(std::string("Tokenizer: unknown symbol '") + c + "'");
        return kNumSpecials + static_cast<int>(pos);
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) ids.push_back(id_of(c));
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            const int k = id - kNumSpecials;
            if (k < 0 || k >= static_cast<int>(alphabet.size()))
                throw std::invalid_argument("Tokenizer: id out of range");
            out.push_back(alphabet[k]);
        }
        return out;
    }

    nlohmann::json to_json() const { return nlohmann::json{{"alphabet", alphabet}}; }
    static Tokenizer from_json(const nlohmann::json& j) { return Tokenizer(j.at("alphabet").get<std::string>()); }
};

}  // namespace melatts
