#pragma once

// Character-level tokenizer with lowercasing and whitespace collapsing.
// A fixed printable alphabet plus UNK/EOS specials; unknown characters map
// to UNK, which decodes to a glyph outside the alphabet.

#include <cctype>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fable/tensor.hpp"

namespace fable {

struct DecodeError : std::runtime_error {
    explicit DecodeError(const std::string& m) : std::runtime_error(m) {}
};

class CharTokenizer {
  public:
    static constexpr int kUnkId = 0;
    static constexpr int kEosId = 1;
    static constexpr char kUnkGlyph = '*';

    explicit CharTokenizer(std::string alphabet = default_alphabet()) : alphabet_(std::move(alphabet)) {
        for (size_t i = 0; i < alphabet_.size(); ++i)
            id_of_[alphabet_[i]] = static_cast<int>(i) + 2;
    }

    static std::string default_alphabet() {
        return "abcdefghijklmnopqrstuvwxyz0123456789 .,?!:;'-";
    }

    static std::string normalize(const std::string& text) {
        std::string out;
        out.reserve(text.size());
        bool pending_space = false;
        for (char c : text) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                pending_space = !out.empty();
                continue;
            }
            if (pending_space) {
                out.push_back(' ');
                pending_space = false;
            }
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
        return out;
    }

    std::vector<int> tokenize(const std::string& text) const {
        if (text.empty()) throw ContractError("tokenize: text must be non-empty");
        const std::string norm = normalize(text);
        std::vector<int> ids;
        ids.reserve(norm.size());
        for (char c : norm) {
            auto it = id_of_.find(c);
            ids.push_back(it == id_of_.end() ? kUnkId : it->second);
        }
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id == kUnkId) {
                out.push_back(kUnkGlyph);
            } else if (id == kEosId) {
                // end-of-sequence carries no surface form
            } else if (id >= 2 && id < vocab_size()) {
                out.push_back(alphabet_[static_cast<size_t>(id - 2)]);
            } else {
                throw DecodeError("detokenize: token id " + std::to_string(id) +
                                  " out of vocabulary");
            }
        }
        return out;
    }

    int vocab_size() const { return static_cast<int>(alphabet_.size()) + 2; }
    const std::string& alphabet() const { return alphabet_; }

  private:
    std::string alphabet_;
    std::unordered_map<char, int> id_of_;
};

}  // namespace fable
