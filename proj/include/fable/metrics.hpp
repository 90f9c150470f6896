#pragma once

// Fine-grained evaluation metrics: hit rate over key knowledge phrases,
// word-level LCS coverage, ROUGE-L F1, and a pluggable semantic-similarity
// provider (the shipped default is a bag-of-tokens cosine, never reported
// as an encoder score).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fable/tokenizer.hpp"

namespace fable {

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

namespace text {

inline std::string normalize(const std::string& s) { return CharTokenizer::normalize(s); }

// Whitespace split after stripping punctuation adjacent to words.
inline std::vector<std::string> words(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        size_t b = 0, e = cur.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(cur[b]))) ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(cur[e - 1]))) --e;
        if (e > b) out.push_back(cur.substr(b, e - b));
        cur.clear();
    };
    for (char c : normalize(s)) {
        if (c == ' ')
            flush();
        else
            cur.push_back(c);
    }
    flush();
    return out;
}

}  // namespace text

// Mean substring-presence indicator of key phrases in the output, both
// sides normalized (lowercase, collapsed whitespace).
inline double hit_rate(const std::string& output, const std::vector<std::string>& key_phrases) {
    if (key_phrases.empty()) throw ValidationError("hit_rate: key_phrases must be non-empty");
    const std::string o = text::normalize(output);
    int hits = 0;
    for (const auto& kp : key_phrases) {
        const std::string p = text::normalize(kp);
        if (p.empty()) throw ValidationError("hit_rate: empty key phrase");
        if (o.find(p) != std::string::npos) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(key_phrases.size());
}

// Standard LCS dynamic program over word tokens.
inline int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// LCS(gold, output) / |gold words|.
inline double lcs_coverage(const std::string& output, const std::string& gold) {
    const auto g = text::words(gold);
    if (g.empty()) throw ValidationError("lcs_coverage: gold is empty after tokenization");
    const auto o = text::words(output);
    return static_cast<double>(lcs_length(g, o)) / static_cast<double>(g.size());
}

// LCS-based F1: P = L/|output|, R = L/|gold|, F = 2PR/(P+R), 0 when L = 0.
inline double rouge_l_f(const std::string& output, const std::string& gold) {
    const auto o = text::words(output);
    const auto g = text::words(gold);
    if (o.empty() || g.empty())
        throw ValidationError("rouge_l_f: inputs must be non-empty after tokenization");
    const int l = lcs_length(o, g);
    if (l == 0) return 0.0;
    const double p = static_cast<double>(l) / static_cast<double>(o.size());
    const double r = static_cast<double>(l) / static_cast<double>(g.size());
    return 2.0 * p * r / (p + r);
}

using SimilarityFn = std::function<double(const std::string&, const std::string&)>;

inline double bag_cosine_similarity(const std::string& a, const std::string& b) {
    std::map<std::string, int> ca, cb;
    for (const auto& w : text::words(a)) ca[w] += 1;
    for (const auto& w : text::words(b)) cb[w] += 1;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [w, c] : ca) {
        na += static_cast<double>(c) * c;
        auto it = cb.find(w);
        if (it != cb.end()) dot += static_cast<double>(c) * it->second;
    }
    for (const auto& [w, c] : cb) nb += static_cast<double>(c) * c;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

class SimilarityRegistry {
  public:
    static SimilarityRegistry& instance() {
        static SimilarityRegistry reg;
        return reg;
    }
    void register_provider(const std::string& name, SimilarityFn fn) { providers_[name] = std::move(fn); }
    const SimilarityFn& get(const std::string& name) const {
        auto it = providers_.find(name);
        if (it == providers_.end())
            throw ConfigError("semantic_similarity: unknown provider '" + name + "'");
        return it->second;
    }

  private:
    SimilarityRegistry() { providers_["bag-cosine"] = bag_cosine_similarity; }
    std::map<std::string, SimilarityFn> providers_;
};

inline double semantic_similarity(const std::string& output, const std::string& gold,
                                  const std::string& provider = "bag-cosine") {
    return SimilarityRegistry::instance().get(provider)(output, gold);
}

struct MetricScores {
    double holistic_lexical = 0.0;   // ROUGE-L F of the holistic answer
    double holistic_semantic = 0.0;  // provider-tagged
    double fine_lexical = 0.0;       // mean over fine QA pairs
    double fine_semantic = 0.0;
    double hit_rate = 0.0;
    double lcs_coverage = 0.0;
    std::string semantic_provider = "bag-cosine";
};

}  // namespace fable
