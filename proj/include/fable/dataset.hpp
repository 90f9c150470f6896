#pragma once

// Unstructured-edit data model: holistic QA + fine-grained QA pairs with
// key knowledge phrases, validation of the construction constraints,
// sub-sentence extraction with containment dedup, templated question
// expansion, and a deterministic synthetic corpus generator.

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fable/metrics.hpp"

namespace fable {

struct ExtractionError : std::runtime_error {
    explicit ExtractionError(const std::string& m) : std::runtime_error(m) {}
};

struct FineQA {
    std::string question;
    std::string answer;
    std::vector<std::string> key_phrases;
    bool seed = true;          // seed vs. expanded paraphrase
    int source_span = -1;      // sub-sentence index in the target output, -1 if unknown
};

struct EditSample {
    std::string id;
    std::string question;       // holistic question q_h
    std::string target_output;  // unstructured target a*_h
    std::vector<FineQA> fine_qas;
    std::vector<std::string> irrelevant;
};

struct Violation {
    std::string code;
    std::string message;
};

inline std::vector<Violation> validate_sample(const EditSample& s) {
    std::vector<Violation> out;
    auto flag = [&](const std::string& code, const std::string& msg) {
        out.push_back({code, "sample " + s.id + ": " + msg});
    };
    if (text::normalize(s.target_output).empty()) flag("empty-target", "target_output is empty");
    if (s.fine_qas.empty()) flag("no-fine-qas", "fine_qas is empty");
    const std::string target_norm = text::normalize(s.target_output);
    std::set<std::string> seen_questions;
    for (size_t i = 0; i < s.fine_qas.size(); ++i) {
        const auto& qa = s.fine_qas[i];
        const std::string tag = "fine_qas[" + std::to_string(i) + "]";
        const std::string ans_norm = text::normalize(qa.answer);
        if (text::words(qa.answer).size() > 15)
            flag("answer-length", tag + ": answer exceeds the 15-token rule");
        for (const auto& kp : qa.key_phrases) {
            const std::string kp_norm = text::normalize(kp);
            if (ans_norm.find(kp_norm) == std::string::npos)
                flag("stay-source", tag + ": key phrase '" + kp + "' is not a substring of its answer");
            if (target_norm.find(kp_norm) == std::string::npos)
                flag("entity-inclusion",
                     tag + ": key phrase '" + kp + "' does not appear in the target output");
        }
        const std::string q_norm = text::normalize(qa.question);
        if (!seen_questions.insert(q_norm).second)
            flag("duplicate-question", tag + ": duplicate fine question '" + qa.question + "'");
    }
    const std::string qh_norm = text::normalize(s.question);
    for (size_t i = 0; i < s.irrelevant.size(); ++i) {
        const std::string d = text::normalize(s.irrelevant[i]);
        if (d == qh_norm)
            flag("irrelevant-overlap", "irrelevant[" + std::to_string(i) + "] equals q_h");
        for (const auto& qa : s.fine_qas)
            if (d == text::normalize(qa.question))
                flag("irrelevant-overlap",
                     "irrelevant[" + std::to_string(i) + "] equals a fine question");
    }
    return out;
}

// ---- JSON schema (versioned) ----

inline nlohmann::json sample_to_json(const EditSample& s) {
    nlohmann::json fq = nlohmann::json::array();
    for (const auto& qa : s.fine_qas) {
        nlohmann::json e = {{"question", qa.question},
                            {"answer", qa.answer},
                            {"key_phrases", qa.key_phrases},
                            {"seed", qa.seed}};
        if (qa.source_span >= 0) e["source_span"] = qa.source_span;
        fq.push_back(std::move(e));
    }
    return {{"id", s.id},
            {"question", s.question},
            {"target_output", s.target_output},
            {"fine_qas", std::move(fq)},
            {"irrelevant", s.irrelevant}};
}

inline EditSample sample_from_json(const nlohmann::json& j) {
    EditSample s;
    s.id = j.at("id").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.target_output = j.at("target_output").get<std::string>();
    for (const auto& e : j.at("fine_qas")) {
        FineQA qa;
        qa.question = e.at("question").get<std::string>();
        qa.answer = e.at("answer").get<std::string>();
        qa.key_phrases = e.at("key_phrases").get<std::vector<std::string>>();
        qa.seed = e.at("seed").get<bool>();
        if (e.contains("source_span")) qa.source_span = e.at("source_span").get<int>();
        s.fine_qas.push_back(std::move(qa));
    }
    s.irrelevant = j.at("irrelevant").get<std::vector<std::string>>();
    return s;
}

inline void save_dataset(const std::vector<EditSample>& samples, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : samples) j["samples"].push_back(sample_to_json(s));
    std::ofstream out(path);
    if (!out) throw ValidationError("save_dataset: cannot open " + path);
    out << j.dump(2) << "\n";
}

inline std::vector<EditSample> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("load_dataset: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("load_dataset: " + path + " is not valid JSON: " + e.what());
    }
    if (!j.contains("version") || !j.contains("samples"))
        throw ValidationError("load_dataset: missing version/samples in " + path);
    std::vector<EditSample> samples;
    for (const auto& e : j.at("samples")) {
        EditSample s;
        try {
            s = sample_from_json(e);
        } catch (const nlohmann::json::exception& ex) {
            const std::string id = e.contains("id") ? e.at("id").get<std::string>() : "<no id>";
            throw ValidationError("load_dataset: sample " + id + ": " + ex.what());
        }
        auto violations = validate_sample(s);
        if (!violations.empty())
            throw ValidationError("load_dataset: " + violations.front().message);
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---- extraction pipeline ----

struct QaCandidate {
    std::string question;
    std::string answer;
    std::vector<std::string> key_phrases;
};

// Provider maps (sentence, full paragraph) to candidate QA pairs.
using QaProvider = std::function<std::vector<QaCandidate>(const std::string& sentence,
                                                          const std::string& paragraph)>;

struct ExtractionConfig {
    int min_words_per_sentence = 6;
    int expansion_multiplier = 5;
    std::vector<std::string> paraphrase_templates = {
        "please tell me {q}", "i want to know {q}",  "answer this {q}",
        "quick question {q}", "just asking {q}",     "one more time {q}",
        "say again {q}",      "now answer {q}",      "do tell {q}",
        "once more {q}",      "here it is {q}",
    };
};

// Terminal-punctuation splitter with a small abbreviation guard list.
inline std::vector<std::string> split_sentences(const std::string& paragraph) {
    static const std::vector<std::string> kAbbrev = {"mr", "mrs", "dr", "st", "no", "vs"};
    const std::string p = text::normalize(paragraph);
    std::vector<std::string> out;
    std::string cur;
    for (size_t i = 0; i < p.size(); ++i) {
        cur.push_back(p[i]);
        if (p[i] == '.' || p[i] == '?' || p[i] == '!') {
            bool abbrev = false;
            if (p[i] == '.') {
                // word immediately before the period (spaces allowed between)
                size_t e = cur.size() - 1;
                while (e > 0 && cur[e - 1] == ' ') --e;
                size_t b = e;
                while (b > 0 && std::isalpha(static_cast<unsigned char>(cur[b - 1]))) --b;
                const std::string w = cur.substr(b, e - b);
                abbrev = std::find(kAbbrev.begin(), kAbbrev.end(), w) != kAbbrev.end();
            }
            if (!abbrev) {
                const std::string t = text::normalize(cur);
                if (!t.empty()) out.push_back(t);
                cur.clear();
            }
        }
    }
    const std::string t = text::normalize(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

// Keep the container, drop the contained (per normalized answer text).
inline std::vector<FineQA> dedup_by_containment(const std::vector<FineQA>& qas) {
    std::vector<FineQA> out;
    std::vector<bool> drop(qas.size(), false);
    for (size_t i = 0; i < qas.size(); ++i) {
        const std::string ai = text::normalize(qas[i].answer);
        for (size_t j = 0; j < qas.size(); ++j) {
            if (i == j || drop[i]) continue;
            const std::string aj = text::normalize(qas[j].answer);
            if (ai == aj) {
                if (j < i) drop[i] = true;  // exact duplicates keep the first
            } else if (aj.find(ai) != std::string::npos) {
                drop[i] = true;
            }
        }
    }
    for (size_t i = 0; i < qas.size(); ++i)
        if (!drop[i]) out.push_back(qas[i]);
    return out;
}

inline std::vector<FineQA> extract_seed_qas(const std::string& target_output,
                                            const QaProvider& provider,
                                            const ExtractionConfig& cfg = {}) {
    if (!provider) throw ConfigError("extract_seed_qas: no qa_provider registered");
    std::vector<FineQA> seeds;
    const auto sentences = split_sentences(target_output);
    for (size_t si = 0; si < sentences.size(); ++si) {
        const auto& sentence = sentences[si];
        if (static_cast<int>(text::words(sentence).size()) < cfg.min_words_per_sentence) continue;
        std::vector<QaCandidate> cands;
        try {
            cands = provider(sentence, target_output);
        } catch (const std::exception& e) {
            throw ExtractionError("extract_seed_qas: provider failed on sentence " +
                                  std::to_string(si) + ": " + e.what());
        }
        std::vector<FineQA> cluster;
        for (const auto& c : cands) {
            // keep pairs whose answers derive from this sentence
            if (sentence.find(text::normalize(c.answer)) == std::string::npos) continue;
            FineQA qa;
            qa.question = c.question;
            qa.answer = c.answer;
            qa.key_phrases = c.key_phrases.empty() ? std::vector<std::string>{c.answer} : c.key_phrases;
            qa.seed = true;
            qa.source_span = static_cast<int>(si);
            cluster.push_back(std::move(qa));
        }
        for (auto& qa : dedup_by_containment(cluster)) seeds.push_back(std::move(qa));
    }
    return seeds;
}

// Deterministic paraphrase expansion: multiplier x S pairs, exactly S
// carrying the seed flag, each paraphrase pointing at the seed's answer.
inline std::vector<FineQA> expand_questions(const std::vector<FineQA>& seeds, int multiplier,
                                            const ExtractionConfig& cfg = {}) {
    if (multiplier < 1) throw ConfigError("expand_questions: multiplier must be >= 1");
    if (static_cast<int>(cfg.paraphrase_templates.size()) < multiplier - 1)
        throw ExtractionError("expand_questions: only " +
                              std::to_string(cfg.paraphrase_templates.size()) +
                              " paraphrase templates for multiplier " + std::to_string(multiplier));
    std::vector<FineQA> out;
    for (const auto& seed : seeds) {
        FineQA s = seed;
        s.seed = true;
        out.push_back(s);
        for (int k = 0; k < multiplier - 1; ++k) {
            const std::string& tpl = cfg.paraphrase_templates[static_cast<size_t>(k)];
            FineQA p = seed;
            p.seed = false;
            const auto pos = tpl.find("{q}");
            p.question = tpl.substr(0, pos) + seed.question + tpl.substr(pos + 3);
            out.push_back(std::move(p));
        }
    }
    return out;
}

// Rule-based question generation over the synthetic fact templates plus a
// few generic forms. An external-LLM provider slot exists but is not
// implemented; everything here runs offline.
inline std::vector<QaCandidate> template_qa_provider(const std::string& sentence,
                                                     const std::string& paragraph) {
    auto subject_of = [&]() -> std::string {
        const std::string p = text::normalize(paragraph);
        const auto pos = p.find(" was born");
        if (pos != std::string::npos) return p.substr(0, pos);
        auto ws = text::words(p);
        if (ws.size() >= 2) return ws[0] + " " + ws[1];
        return ws.empty() ? "" : ws[0];
    };
    struct Pattern {
        std::regex re;
        std::function<QaCandidate(const std::smatch&, const std::string&)> build;
    };
    static const std::vector<Pattern> kPatterns = {
        {std::regex("^(.+) was born in (.+?)( \\.)?$"),
         [](const std::smatch& m, const std::string&) {
             return QaCandidate{"where was " + m[1].str() + " born ?", m[2].str(), {m[2].str()}};
         }},
        {std::regex("^(?:he|she|they) (?:now )?works as a (.+?) in town( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"what does " + subj + " work as ?", m[1].str(), {m[1].str()}};
         }},
        {std::regex("^(?:he|she|they) likes to eat (.+?) at noon( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"what does " + subj + " like to eat ?", m[1].str(), {m[1].str()}};
         }},
        {std::regex("^(?:he|she|they) plays the (.+?) with skill( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"what does " + subj + " play ?", m[1].str(), {m[1].str()}};
         }},
        {std::regex("^(?:he|she|they) owns a small (.+?) at home( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"what does " + subj + " own ?", m[1].str(), {m[1].str()}};
         }},
        {std::regex("^(?:he|she|they) lives in (.+?) these days( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"where does " + subj + " live ?", m[1].str(), {m[1].str()}};
         }},
        {std::regex("^(?:he|she|they) studied (.+?) for many years( \\.)?$"),
         [](const std::smatch& m, const std::string& subj) {
             return QaCandidate{"what did " + subj + " study ?", m[1].str(), {m[1].str()}};
         }},
    };
    const std::string norm = text::normalize(sentence);
    const std::string subj = subject_of();
    std::vector<QaCandidate> out;
    for (const auto& p : kPatterns) {
        std::smatch m;
        if (std::regex_match(norm, m, p.re)) {
            out.push_back(p.build(m, subj));
            break;
        }
    }
    return out;
}

class QaProviderRegistry {
  public:
    static QaProviderRegistry& instance() {
        static QaProviderRegistry reg;
        return reg;
    }
    void register_provider(const std::string& name, QaProvider fn) { providers_[name] = std::move(fn); }
    const QaProvider& get(const std::string& name) const {
        auto it = providers_.find(name);
        if (it == providers_.end())
            throw ConfigError("qa provider '" + name + "' is not registered");
        return it->second;
    }

  private:
    QaProviderRegistry() {
        providers_["template"] = template_qa_provider;
        providers_["external-llm"] = [](const std::string&, const std::string&)
            -> std::vector<QaCandidate> {
            throw ConfigError("the external-llm qa provider is a slot only; no backend is shipped");
        };
    }
    std::map<std::string, QaProvider> providers_;
};

// v distinct prompts in seeded shuffle order.
inline std::vector<std::string> sample_irrelevant(const std::vector<std::string>& pool, int v,
                                                  uint64_t seed) {
    if (v < 0 || static_cast<size_t>(v) > pool.size())
        throw ValidationError("sample_irrelevant: pool of " + std::to_string(pool.size()) +
                              " cannot provide " + std::to_string(v) + " prompts");
    std::vector<size_t> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(v));
    for (int i = 0; i < v; ++i) out.push_back(pool[idx[static_cast<size_t>(i)]]);
    return out;
}

// ---- synthetic desk-scale corpus ----

struct SyntheticCorpus {
    std::vector<EditSample> samples;        // counterfactual edit requests (seed QAs only)
    std::vector<std::string> corpus_lines;  // pretraining lines
    std::vector<std::string> irrelevant_pool;
};

namespace detail {

struct FactTemplate {
    const char* sentence;  // with {name} / {v}
    const char* question;  // with {name}
};

inline const std::vector<FactTemplate>& fact_templates() {
    static const std::vector<FactTemplate> t = {
        {"{name} was born in {v} .", "where was {name} born ?"},
        {"he works as a {v} in town .", "what does {name} work as ?"},
        {"he likes to eat {v} at noon .", "what does {name} like to eat ?"},
        {"he plays the {v} with skill .", "what does {name} play ?"},
        {"he owns a small {v} at home .", "what does {name} own ?"},
        {"he lives in {v} these days .", "where does {name} live ?"},
        {"he studied {v} for many years .", "what did {name} study ?"},
    };
    return t;
}

inline std::string fill(const std::string& tpl, const std::string& key, const std::string& value) {
    std::string out = tpl;
    size_t pos;
    while ((pos = out.find(key)) != std::string::npos) out.replace(pos, key.size(), value);
    return out;
}

inline std::string syllable_word(std::mt19937_64& rng, int min_syll, int max_syll) {
    static const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m",
                                                     "n", "p", "r", "s", "t", "v", "z"};
    static const std::vector<std::string> kNuclei = {"a", "e", "i", "o", "u"};
    std::uniform_int_distribution<int> nsyll(min_syll, max_syll);
    std::uniform_int_distribution<size_t> po(0, kOnsets.size() - 1);
    std::uniform_int_distribution<size_t> pn(0, kNuclei.size() - 1);
    const int n = nsyll(rng);
    std::string w;
    for (int i = 0; i < n; ++i) w += kOnsets[po(rng)] + kNuclei[pn(rng)];
    return w;
}

}  // namespace detail

// Templated entity-fact paragraphs.  Every attribute has a closed pool of
// value words that all occur in the pretraining corpus, so word surface
// forms are in-distribution; within a pool the words start with pairwise
// distinct characters, so a value is fully determined by its first letter.
// Edit samples pair values with entity names that never occur in the
// corpus, which makes each requested fact counterfactual even though its
// surface vocabulary is familiar.  Deterministic under seed.
inline SyntheticCorpus generate_synthetic_corpus(int n_samples, uint64_t seed,
                                                 int n_pretrain_entities = 80,
                                                 int n_irrelevant_per_sample = 20,
                                                 int n_single_use_paragraphs = 300) {
    if (n_samples < 1) throw ValidationError("generate_synthetic_corpus: n_samples must be >= 1");
    std::mt19937_64 rng(seed);
    const auto& templates = detail::fact_templates();
    ExtractionConfig xcfg;
    static const std::string kOnsets = "bdfgklmnprstvz";
    constexpr int kPoolSize = 10;

    std::set<std::string> used_words;
    // per-attribute value pools; distinct first characters within a pool
    std::vector<std::vector<std::string>> pools(templates.size());
    for (size_t a = 0; a < templates.size(); ++a) {
        for (int j = 0; j < kPoolSize; ++j) {
            for (int tries = 0;; ++tries) {
                if (tries >= 1000)
                    throw ValidationError("generate_synthetic_corpus: syllable space exhausted");
                std::string w = detail::syllable_word(rng, 2, 3);
                w[0] = kOnsets[static_cast<size_t>(j)];
                if (used_words.insert(w).second) {
                    pools[a].push_back(std::move(w));
                    break;
                }
            }
        }
    }

    auto fresh_word = [&](int min_syll, int max_syll) {
        for (int tries = 0; tries < 1000; ++tries) {
            std::string w = detail::syllable_word(rng, min_syll, max_syll);
            if (used_words.insert(w).second) return w;
        }
        throw ValidationError("generate_synthetic_corpus: syllable space exhausted");
    };
    auto pick_attrs = [&]() {
        // attribute 0 (birth) always present, plus two others in index order
        std::vector<int> others;
        for (int a = 1; a < static_cast<int>(templates.size()); ++a) others.push_back(a);
        std::shuffle(others.begin(), others.end(), rng);
        std::vector<int> attrs{0, others[0], others[1]};
        std::sort(attrs.begin() + 1, attrs.end());
        return attrs;
    };
    std::uniform_int_distribution<int> pool_pick(0, kPoolSize - 1);

    SyntheticCorpus out;

    // pretraining world
    for (int e = 0; e < n_pretrain_entities; ++e) {
        const std::string name = fresh_word(2, 2) + " " + fresh_word(2, 2);
        const auto attrs = pick_attrs();
        std::string paragraph;
        std::vector<std::pair<std::string, std::string>> qas;  // question, answer
        for (int a : attrs) {
            const std::string& value = pools[static_cast<size_t>(a)][static_cast<size_t>(pool_pick(rng))];
            const auto& t = templates[static_cast<size_t>(a)];
            std::string sent = detail::fill(detail::fill(t.sentence, "{name}", name), "{v}", value);
            paragraph += (paragraph.empty() ? "" : " ") + sent;
            qas.emplace_back(detail::fill(t.question, "{name}", name), value);
        }
        out.corpus_lines.push_back("q: tell me about " + name + " . a: " + paragraph);
        for (const auto& [q, a] : qas) {
            out.corpus_lines.push_back("q: " + q + " a: " + a + " .");
            out.irrelevant_pool.push_back(q);
        }
        // expose the paraphrase wrappers in the pretraining distribution
        std::uniform_int_distribution<size_t> pt(0, xcfg.paraphrase_templates.size() - 1);
        for (int r = 0; r < 3; ++r) {
            const auto& [q0, a0] = qas[static_cast<size_t>(e + r) % qas.size()];
            const std::string wrapped =
                detail::fill(xcfg.paraphrase_templates[pt(rng)], "{q}", q0);
            out.corpus_lines.push_back("q: " + wrapped + " a: " + a0 + " .");
        }
    }

    // single-use paragraphs: each name occurs exactly once in the corpus, so
    // repeating it after "a:" can only be learned as copying from the prompt
    for (int e = 0; e < n_single_use_paragraphs; ++e) {
        const std::string name = fresh_word(2, 2) + " " + fresh_word(2, 2);
        const auto attrs = pick_attrs();
        std::string paragraph;
        for (int a : attrs) {
            const std::string& value = pools[static_cast<size_t>(a)][static_cast<size_t>(pool_pick(rng))];
            const auto& t = templates[static_cast<size_t>(a)];
            paragraph += (paragraph.empty() ? "" : " ") +
                         detail::fill(detail::fill(t.sentence, "{name}", name), "{v}", value);
        }
        out.corpus_lines.push_back("q: tell me about " + name + " . a: " + paragraph);
    }

    std::string corpus_text;
    for (const auto& l : out.corpus_lines) corpus_text += l + "\n";

    // entity-name words for edit requests: never occur in the corpus
    auto fresh_counterfactual = [&](int min_syll, int max_syll) {
        for (int tries = 0; tries < 1000; ++tries) {
            std::string w = detail::syllable_word(rng, min_syll, max_syll);
            if (!used_words.insert(w).second) continue;
            if (corpus_text.find(w) != std::string::npos) continue;
            return w;
        }
        throw ValidationError("generate_synthetic_corpus: counterfactual space exhausted");
    };

    for (int i = 0; i < n_samples; ++i) {
        EditSample s;
        s.id = "edit-" + std::string(i + 1 < 10 ? "000" : (i + 1 < 100 ? "00" : "0")) +
               std::to_string(i + 1);
        const std::string name = fresh_counterfactual(2, 2) + " " + fresh_counterfactual(2, 2);
        const auto attrs = pick_attrs();
        std::string paragraph;
        for (size_t k = 0; k < attrs.size(); ++k) {
            const std::string& value =
                pools[static_cast<size_t>(attrs[k])][static_cast<size_t>(pool_pick(rng))];
            const auto& t = templates[static_cast<size_t>(attrs[k])];
            std::string sent = detail::fill(detail::fill(t.sentence, "{name}", name), "{v}", value);
            paragraph += (paragraph.empty() ? "" : " ") + sent;
            FineQA qa;
            qa.question = detail::fill(t.question, "{name}", name);
            qa.answer = value;
            qa.key_phrases = {value};
            qa.seed = true;
            qa.source_span = static_cast<int>(k);
            s.fine_qas.push_back(std::move(qa));
        }
        s.question = "tell me about " + name + " .";
        s.target_output = paragraph;
        s.irrelevant = sample_irrelevant(out.irrelevant_pool, n_irrelevant_per_sample,
                                         seed + 1000 + static_cast<uint64_t>(i));
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace fable
