#include <doctest.h>

#include <cstdio>

#include "fable/dataset.hpp"

using namespace fable;

namespace {

EditSample make_valid_sample() {
    EditSample s;
    s.id = "fixture-1";
    s.question = "tell me about foo bar .";
    s.target_output = "foo bar was born in baz . he lives in qux these days .";
    s.fine_qas = {{"where was foo bar born ?", "baz", {"baz"}, true, 0},
                  {"where does foo bar live ?", "qux", {"qux"}, true, 1}};
    s.irrelevant = {"where was someone else born ?"};
    return s;
}

}  // namespace

TEST_CASE("a well-formed sample validates cleanly") {
    CHECK(validate_sample(make_valid_sample()).empty());
}

TEST_CASE("the validator names each violation") {
    auto has = [](const std::vector<Violation>& v, const std::string& code) {
        for (const auto& x : v)
            if (x.code == code) return true;
        return false;
    };
    {
        auto s = make_valid_sample();
        s.target_output = "   ";
        CHECK(has(validate_sample(s), "empty-target"));
    }
    {
        auto s = make_valid_sample();
        s.fine_qas.clear();
        CHECK(has(validate_sample(s), "no-fine-qas"));
    }
    {
        auto s = make_valid_sample();
        // 16 words breaches the 15-word answer rule
        s.fine_qas[0].answer =
            "one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
            "fifteen sixteen";
        CHECK(has(validate_sample(s), "answer-length"));
    }
    {
        auto s = make_valid_sample();
        // 15 words is still within the rule
        s.fine_qas[0].answer =
            "one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
            "fifteen";
        CHECK_FALSE(has(validate_sample(s), "answer-length"));
    }
    {
        auto s = make_valid_sample();
        s.fine_qas[0].key_phrases = {"not in the answer"};
        auto v = validate_sample(s);
        CHECK(has(v, "stay-source"));
        CHECK(has(v, "entity-inclusion"));
    }
    {
        auto s = make_valid_sample();
        s.fine_qas.push_back(s.fine_qas[0]);
        CHECK(has(validate_sample(s), "duplicate-question"));
    }
    {
        auto s = make_valid_sample();
        s.irrelevant.push_back(s.fine_qas[0].question);
        CHECK(has(validate_sample(s), "irrelevant-overlap"));
    }
}

TEST_CASE("dataset JSON round trip preserves every field") {
    auto s = make_valid_sample();
    const std::string path = "dataset_roundtrip_test.json";
    save_dataset({s}, path);
    auto loaded = load_dataset(path);
    std::remove(path.c_str());
    REQUIRE(loaded.size() == 1);
    const auto& t = loaded[0];
    CHECK(t.id == s.id);
    CHECK(t.question == s.question);
    CHECK(t.target_output == s.target_output);
    REQUIRE(t.fine_qas.size() == s.fine_qas.size());
    for (size_t i = 0; i < t.fine_qas.size(); ++i) {
        CHECK(t.fine_qas[i].question == s.fine_qas[i].question);
        CHECK(t.fine_qas[i].answer == s.fine_qas[i].answer);
        CHECK(t.fine_qas[i].key_phrases == s.fine_qas[i].key_phrases);
        CHECK(t.fine_qas[i].seed == s.fine_qas[i].seed);
        CHECK(t.fine_qas[i].source_span == s.fine_qas[i].source_span);
    }
    CHECK(t.irrelevant == s.irrelevant);
}

TEST_CASE("loading rejects malformed files with a named sample") {
    const std::string path = "dataset_malformed_test.json";
    {
        std::ofstream f(path);
        f << "{\"version\":1,\"samples\":[{\"id\":\"broken-7\",\"question\":\"q\"}]}";
    }
    try {
        load_dataset(path);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("broken-7") != std::string::npos);
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_dataset("no_such_file.json"), ValidationError);
}

TEST_CASE("sentence splitting honors terminal punctuation and abbreviations") {
    auto s = split_sentences("first sentence is here . second one now ! is this third ?");
    REQUIRE(s.size() == 3);
    CHECK(s[0] == "first sentence is here .");
    CHECK(s[2] == "is this third ?");
    auto a = split_sentences("mr . smith lives here . he is nice .");
    CHECK(a.size() == 2);  // "mr ." does not end a sentence
}

TEST_CASE("containment dedup keeps the longer answer") {
    // the D-word phrasing pair: "a decade" is contained in "over a decade"
    std::vector<FineQA> qas = {
        {"how long did he serve ?", "a decade", {"a decade"}, true, 0},
        {"how long did he serve on the council ?", "over a decade", {"over a decade"}, true, 0},
    };
    auto kept = dedup_by_containment(qas);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].answer == "over a decade");

    // exact duplicates keep the first occurrence
    std::vector<FineQA> dup = {{"q1", "same", {"same"}, true, 0}, {"q2", "same", {"same"}, true, 1}};
    auto kept2 = dedup_by_containment(dup);
    REQUIRE(kept2.size() == 1);
    CHECK(kept2[0].question == "q1");

    // unrelated answers both survive
    std::vector<FineQA> indep = {{"q1", "city council member", {}, true, 0},
                                 {"q2", "state representative", {}, true, 1}};
    CHECK(dedup_by_containment(indep).size() == 2);
}

TEST_CASE("containment dedup is idempotent on randomized fixtures") {
    std::mt19937_64 rng(4242);
    const std::vector<std::string> vocab = {"alpha", "beta", "gamma", "delta", "over", "a", "decade"};
    std::uniform_int_distribution<int> nq(1, 8), nw(1, 4), pick(0, 6);
    for (int fixture = 0; fixture < 100; ++fixture) {
        std::vector<FineQA> qas;
        const int q = nq(rng);
        for (int i = 0; i < q; ++i) {
            FineQA f;
            f.question = "q" + std::to_string(i);
            for (int w = nw(rng); w > 0; --w)
                f.answer += (f.answer.empty() ? "" : " ") + vocab[static_cast<size_t>(pick(rng))];
            qas.push_back(std::move(f));
        }
        auto once = dedup_by_containment(qas);
        auto twice = dedup_by_containment(once);
        REQUIRE(once.size() == twice.size());
        for (size_t i = 0; i < once.size(); ++i) {
            CHECK(once[i].question == twice[i].question);
            CHECK(once[i].answer == twice[i].answer);
        }
        // no surviving answer is contained in a different surviving answer
        for (size_t i = 0; i < once.size(); ++i)
            for (size_t j = 0; j < once.size(); ++j) {
                if (i == j) continue;
                if (once[i].answer != once[j].answer)
                    CHECK(once[j].answer.find(once[i].answer) == std::string::npos);
            }
    }
}

TEST_CASE("the template provider reads the synthetic fact sentences") {
    const std::string para =
        "lomi kera was born in tasu . he lives in rodano these days . he studied pafu for many years .";
    auto sents = split_sentences(para);
    REQUIRE(sents.size() == 3);
    auto c0 = template_qa_provider(sents[0], para);
    REQUIRE(c0.size() == 1);
    CHECK(c0[0].question == "where was lomi kera born ?");
    CHECK(c0[0].answer == "tasu");
    auto c1 = template_qa_provider(sents[1], para);
    REQUIRE(c1.size() == 1);
    CHECK(c1[0].question == "where does lomi kera live ?");
    CHECK(c1[0].answer == "rodano");
    CHECK(template_qa_provider("completely unrelated sentence here today .", para).empty());
}

TEST_CASE("seed extraction filters short sentences and foreign answers") {
    const std::string para =
        "lomi kera was born in tasu . too short . he studied pafu for many years .";
    auto seeds = extract_seed_qas(para, QaProviderRegistry::instance().get("template"));
    REQUIRE(seeds.size() == 2);
    CHECK(seeds[0].source_span == 0);
    CHECK(seeds[1].answer == "pafu");
    for (const auto& s : seeds) CHECK(s.seed);

    // a provider that throws surfaces the failing sentence index
    QaProvider bad = [](const std::string&, const std::string&) -> std::vector<QaCandidate> {
        throw std::runtime_error("backend offline");
    };
    CHECK_THROWS_AS(extract_seed_qas(para, bad), ExtractionError);
    CHECK_THROWS_AS(
        extract_seed_qas(para, QaProviderRegistry::instance().get("external-llm")), ExtractionError);
    CHECK_THROWS_AS(QaProviderRegistry::instance().get("nonexistent"), ConfigError);
}

TEST_CASE("paraphrase expansion produces multiplier x S questions") {
    std::vector<FineQA> seeds = {{"where was x born ?", "tasu", {"tasu"}, true, 0},
                                 {"what did x study ?", "pafu", {"pafu"}, true, 2}};
    for (int mult : {1, 5, 10}) {
        auto all = expand_questions(seeds, mult);
        CHECK(all.size() == seeds.size() * static_cast<size_t>(mult));
        int seed_count = 0;
        std::set<std::string> questions;
        for (const auto& qa : all) {
            if (qa.seed) ++seed_count;
            questions.insert(qa.question);
            CHECK((qa.answer == "tasu" || qa.answer == "pafu"));
        }
        CHECK(seed_count == static_cast<int>(seeds.size()));
        CHECK(questions.size() == all.size());  // paraphrases are distinct
    }
    CHECK_THROWS_AS(expand_questions(seeds, 100), ExtractionError);  // template budget exceeded
}

TEST_CASE("irrelevant sampling is seeded and bounded") {
    std::vector<std::string> pool;
    for (int i = 0; i < 30; ++i) pool.push_back("prompt " + std::to_string(i));
    auto a = sample_irrelevant(pool, 20, 9);
    auto b = sample_irrelevant(pool, 20, 9);
    CHECK(a == b);
    CHECK(a.size() == 20);
    CHECK(std::set<std::string>(a.begin(), a.end()).size() == 20);
    CHECK(sample_irrelevant(pool, 20, 10) != a);
    CHECK_THROWS_AS(sample_irrelevant(pool, 31, 0), ValidationError);
}

TEST_CASE("the synthetic world validates and its edits are counterfactual") {
    auto world = generate_synthetic_corpus(6, 11);
    CHECK(world.samples.size() == 6);
    CHECK(!world.corpus_lines.empty());
    std::string corpus_text;
    for (const auto& l : world.corpus_lines) corpus_text += l + "\n";
    for (const auto& s : world.samples) {
        CHECK(validate_sample(s).empty());
        CHECK(s.irrelevant.size() == 20);
        // the edited entity never occurs in the pretraining text, so every
        // requested (entity, value) fact is counterfactual even though the
        // value words themselves are in-distribution vocabulary
        const auto name_end = s.question.find(" ."); // "tell me about {name} ."
        REQUIRE(name_end != std::string::npos);
        const std::string name = s.question.substr(14, name_end - 14);
        for (const auto& w : text::words(name))
            CHECK(corpus_text.find(w) == std::string::npos);
        // value words do occur in the corpus (familiar surface forms)
        for (const auto& qa : s.fine_qas)
            CHECK(corpus_text.find(" " + qa.answer + " ") != std::string::npos);
    }
    // determinism
    auto again = generate_synthetic_corpus(6, 11);
    CHECK(again.corpus_lines == world.corpus_lines);
    CHECK(again.samples[3].target_output == world.samples[3].target_output);

    // the extraction pipeline recovers each sample's facts from its target text
    for (const auto& s : world.samples) {
        auto seeds = extract_seed_qas(s.target_output, template_qa_provider);
        CHECK(seeds.size() == s.fine_qas.size());
    }
}
