// End-to-end acceptance gate. Each numbered criterion prints exactly one
// PASS/FAIL line; the exit code is zero only if every criterion passes.
//
//  1  metric exactness against closed-form fixtures and a brute-force
//     subsequence oracle
//  2  finite-difference validation of every autodiff primitive
//  3  editing efficacy on a 20-sample suite (exact holistic recall and a
//     fine-grained hit-rate gain)
//  4  both stages carry measurable weight (ablation gaps)
//  5  stage one demonstrably eases stage two (trajectory dominance)
//  6  locality: irrelevant prompts keep their pre-edit outputs
//  7  mutation scope: parameters outside the designated layers are
//     bit-identical after editing
//  8  dataset pipeline contracts (validation, expansion, dedup idempotence)

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include "fable/harness.hpp"

using namespace fable;
using clk = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, bool ok, const std::string& what, const std::string& detail) {
    if (!ok) ++g_failures;
    std::printf("%s criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.c_str());
    std::fflush(stdout);
}

double secs_since(clk::time_point t0) {
    return std::chrono::duration<double>(clk::now() - t0).count();
}

int lcs_brute_force(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const auto& s = a.size() <= b.size() ? a : b;
    const auto& t = a.size() <= b.size() ? b : a;
    int best = 0;
    for (size_t mask = 0; mask < (size_t{1} << s.size()); ++mask) {
        std::vector<std::string> sub;
        for (size_t i = 0; i < s.size(); ++i)
            if (mask & (size_t{1} << i)) sub.push_back(s[i]);
        size_t j = 0;
        for (size_t i = 0; i < t.size() && j < sub.size(); ++i)
            if (t[i] == sub[j]) ++j;
        if (j == sub.size()) best = std::max(best, static_cast<int>(sub.size()));
    }
    return best;
}

void criterion_1() {
    const auto t0 = clk::now();
    bool ok = true;
    std::ostringstream why;

    if (std::abs(lcs_coverage("North of Zealand", "North Island of New Zealand") - 0.6) > 1e-12) {
        ok = false;
        why << "coverage fixture != 0.6; ";
    }
    if (hit_rate("born in wellington", {"wellington", "auckland"}) != 0.5 ||
        hit_rate("wellington and auckland", {"wellington", "auckland"}) != 1.0) {
        ok = false;
        why << "hit-rate fixtures wrong; ";
    }
    if (std::abs(rouge_l_f("a b", "a b c") - 0.8) > 1e-12) {
        ok = false;
        why << "F-measure fixture wrong; ";
    }

    std::mt19937_64 rng(20260826);
    std::uniform_int_distribution<int> len(0, 10), pick(0, 3);
    const std::vector<std::string> vocab = {"aa", "bb", "cc", "dd"};
    int mismatches = 0;
    for (int it = 0; it < 1000; ++it) {
        std::vector<std::string> a, b;
        for (int i = len(rng); i > 0; --i) a.push_back(vocab[static_cast<size_t>(pick(rng))]);
        for (int i = len(rng); i > 0; --i) b.push_back(vocab[static_cast<size_t>(pick(rng))]);
        if (lcs_length(a, b) != lcs_brute_force(a, b)) ++mismatches;
    }
    if (mismatches > 0) {
        ok = false;
        why << mismatches << " oracle mismatches; ";
    }
    const double dt = secs_since(t0);
    if (dt >= 10.0) {
        ok = false;
        why << "took " << dt << "s, budget 10s; ";
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "1000 oracle pairs, 0.6 fixture, %.2fs", dt);
    report(1, ok, "metric exactness", ok ? buf : why.str());
}

void criterion_2() {
    const auto t0 = clk::now();
    std::mt19937_64 rng(7);
    auto rnd = [&](const Shape& shape, double lo = -1.5, double hi = 1.5) {
        std::uniform_real_distribution<double> d(lo, hi);
        std::vector<double> v(static_cast<size_t>(numel_of(shape)));
        for (auto& x : v) x = d(rng);
        return Tensor::leaf(shape, std::move(v));
    };
    int instances = 0;
    double worst = 0.0;
    auto check = [&](const std::function<Tensor(const Tensor&)>& f, Tensor x) {
        worst = std::max(worst, finite_difference_check(f, std::move(x)));
        ++instances;
    };
    for (int rep = 0; rep < 4; ++rep) {
        Tensor m45 = rnd({4, 5}), m34 = rnd({3, 4}), m54 = rnd({5, 4});
        Tensor bias = rnd({4}), m26 = rnd({2, 6}), v7 = rnd({7}), w36 = rnd({3, 6});
        Tensor g6 = rnd({6}, 0.5, 1.5), b6 = rnd({6}), w46 = rnd({4, 6}), x46 = rnd({4, 6});
        Tensor w43 = rnd({4, 3}), c23 = rnd({2, 3}), wc0 = rnd({4, 3}), wc1 = rnd({2, 5});
        Tensor w24 = rnd({2, 4}), w23 = rnd({2, 3}), v4 = rnd({4});
        check([&](const Tensor& x) { return sum(matmul(x, m45)); }, rnd({3, 4}));
        check([&](const Tensor& x) { return sum(matmul(m34, x)); }, rnd({4, 5}));
        check([&](const Tensor& x) { return sum(matmul(x, m45, true, false)); }, rnd({4, 3}));
        check([&](const Tensor& x) { return sum(matmul(m34, x, false, true)); }, rnd({5, 4}));
        check([&](const Tensor& x) { return sum(matmul(x, m54, true, true)); }, rnd({4, 3}));
        check([&](const Tensor& x) { return sum(add(x, m26)); }, rnd({2, 6}));
        check([&](const Tensor& x) { return sum(add(m34, x)); }, rnd({4}));
        check([&](const Tensor& x) { return sum(mul(x, m26)); }, rnd({2, 6}));
        check([&](const Tensor& x) { return sum(sub(v7, x)); }, rnd({7}));
        check([&](const Tensor& x) { return sum(scale(x, -2.75)); }, rnd({5}));
        check([&](const Tensor& x) { return sum(mul(softmax_last(x), w36)); }, rnd({3, 6}));
        check([&](const Tensor& x) { return sum(mul(layer_norm(x, g6, b6), w46)); }, rnd({4, 6}));
        check([&](const Tensor& g) { return sum(mul(layer_norm(x46, g, b6), w46)); },
              rnd({6}, 0.5, 1.5));
        check([&](const Tensor& b) { return sum(mul(layer_norm(x46, g6, b), w46)); }, rnd({6}));
        check([&](const Tensor& x) { return sum(gelu(x)); }, rnd({3, 5}));
        check([&](const Tensor& t) { return sum(mul(embedding(t, {0, 2, 2, 1}), w43)); },
              rnd({5, 3}));
        check([&](const Tensor& x) { return sum(mul(concat({x, c23}, 0), wc0)); }, rnd({2, 3}));
        check([&](const Tensor& x) { return sum(mul(concat({c23, x}, 1), wc1)); }, rnd({2, 2}));
        check([&](const Tensor& x) { return sum(mul(slice(x, 0, 1, 2), w24)); }, rnd({5, 4}));
        check([&](const Tensor& x) { return sum(mul(slice(x, 1, 2, 3), w23)); }, rnd({2, 6}));
        check([&](const Tensor& x) { return sum(mul(row(x, 2), v4)); }, rnd({3, 4}));
        check([&](const Tensor& x) { return sum(x); }, rnd({3, 3}));
        check([&](const Tensor& x) { return mean(x); }, rnd({8}));
        check([&](const Tensor& x) { return squared_norm(x); }, rnd({2, 5}));
        check([&](const Tensor& x) { return nll_logits(x, {1, 0, 3}); }, rnd({3, 4}));
        check([&](const Tensor& x) { return scale(nll_logits(x, {2}), 0.5); }, rnd({1, 5}));
    }
    const double dt = secs_since(t0);
    const bool ok = instances >= 100 && worst <= 1e-4 && dt < 60.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d instances, worst rel err %.2e, %.2fs", instances, worst,
                  dt);
    report(2, ok, "gradients match finite differences", buf);
}

void criterion_8(const SyntheticCorpus& world) {
    bool ok = true;
    std::ostringstream why;
    for (const auto& s : world.samples) {
        auto v = validate_sample(s);
        if (!v.empty()) {
            ok = false;
            why << s.id << ": " << v.front().code << "; ";
        }
    }
    for (const auto& s : world.samples) {
        auto expanded = expand_questions(s.fine_qas, 5);
        if (expanded.size() != s.fine_qas.size() * 5) {
            ok = false;
            why << s.id << ": expansion != 5x; ";
        }
        int seeds = 0;
        for (const auto& qa : expanded) seeds += qa.seed ? 1 : 0;
        if (seeds != static_cast<int>(s.fine_qas.size())) {
            ok = false;
            why << s.id << ": seed flags wrong; ";
        }
    }
    std::mt19937_64 rng(99);
    const std::vector<std::string> vocab = {"alpha", "beta", "over", "a", "decade", "gamma"};
    std::uniform_int_distribution<int> nq(1, 8), nw(1, 4), pick(0, 5);
    for (int fixture = 0; fixture < 100; ++fixture) {
        std::vector<FineQA> qas;
        for (int i = nq(rng); i > 0; --i) {
            FineQA f;
            f.question = "q" + std::to_string(i);
            for (int w = nw(rng); w > 0; --w)
                f.answer += (f.answer.empty() ? "" : " ") + vocab[static_cast<size_t>(pick(rng))];
            qas.push_back(std::move(f));
        }
        auto once = dedup_by_containment(qas);
        auto twice = dedup_by_containment(once);
        bool same = once.size() == twice.size();
        for (size_t i = 0; same && i < once.size(); ++i)
            same = once[i].question == twice[i].question && once[i].answer == twice[i].answer;
        if (!same) {
            ok = false;
            why << "dedup not idempotent on fixture " << fixture << "; ";
        }
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%zu samples valid, 5x expansion, 100 dedup fixtures",
                  world.samples.size());
    report(8, ok, "dataset pipeline contracts", ok ? buf : why.str());
}

void criterion_7(const TransformerLM& base, const CharTokenizer& tok,
                 const std::vector<EditSample>& samples, const EditConfig& cfg) {
    bool ok = true;
    std::ostringstream why;
    std::set<size_t> editable;
    for (int l : cfg.edit_layer_set) {
        const size_t lo = 2 + static_cast<size_t>(l - 1) * 12;
        for (size_t i = lo; i < lo + 12; ++i) editable.insert(i);
    }
    {
        const size_t lo = 2 + static_cast<size_t>(cfg.partition.l_hol - 1) * 12;
        for (size_t i = lo; i < lo + 12; ++i) editable.insert(i);
    }
    for (size_t si = 0; si < 3 && si < samples.size(); ++si) {
        auto sample = expand_sample(samples[si], cfg.expansion_multiplier);
        auto m = base.clone();
        std::vector<std::vector<double>> before;
        for (const auto& p : m.parameters()) before.push_back(p.values());
        run_fable(m, tok, sample, cfg, EditMode::kFull);
        auto params = m.parameters();
        for (size_t i = 0; i < params.size(); ++i) {
            const bool same = params[i].values() == before[i];
            if (editable.count(i) && same) {
                ok = false;
                why << samples[si].id << ": editable parameter " << i << " untouched; ";
            }
            if (!editable.count(i) && !same) {
                ok = false;
                why << samples[si].id << ": out-of-scope parameter " << i << " changed; ";
            }
        }
    }
    report(7, ok, "mutation scope is exactly the designated layers",
           ok ? "3 samples bit-compared" : why.str());
}

}  // namespace

int main() {
    const auto t_all = clk::now();
    criterion_1();
    criterion_2();

    const uint64_t kSeed = 1;
    auto world = generate_synthetic_corpus(20, kSeed);
    criterion_8(world);

    std::printf("# pretraining the base model (this is the slow part)...\n");
    std::fflush(stdout);
    LMConfig lm_cfg;
    lm_cfg.seed = kSeed;
    auto trained = train_toy_lm(world.corpus_lines, lm_cfg, 4000, 3e-3, 4);
    std::printf("# pretraining done: loss %.4f -> %.4f, %.0fs elapsed\n",
                trained.loss_history.front(), trained.loss_history.back(), secs_since(t_all));
    std::fflush(stdout);
    const TransformerLM& base = trained.model;
    CharTokenizer tok;

    EditConfig cfg;
    cfg.seed = kSeed;

    criterion_7(base, tok, world.samples, cfg);

    // full suite: 20 samples x {full, no_stage1, no_stage2}
    auto batch = run_batch(base, tok, world.samples, cfg,
                           {EditMode::kFull, EditMode::kNoStage1, EditMode::kNoStage2},
                           "bag-cosine", &std::cerr);

    // collect per-mode data
    struct ModeData {
        Aggregate hit_rate, rouge, locality, exact;
        std::vector<const SampleRun*> runs;
    };
    std::map<std::string, ModeData> md;
    Aggregate pre_hit_rate;
    double max_full_seconds = 0.0;
    int failed_runs = 0;
    for (const auto& run : batch.runs) {
        if (run.failed) {
            ++failed_runs;
            continue;
        }
        auto& m = md[run.mode];
        m.hit_rate.add(run.post.scores.hit_rate);
        m.rouge.add(run.post.scores.holistic_lexical);
        m.locality.add(run.locality_match);
        m.exact.add(run.holistic_exact ? 1.0 : 0.0);
        m.runs.push_back(&run);
        if (run.mode == "full") {
            pre_hit_rate.add(run.pre.scores.hit_rate);
            max_full_seconds = std::max(max_full_seconds, run.wall_seconds);
        }
    }

    {  // criterion 3: efficacy
        const bool have = failed_runs == 0 && md.count("full") && !md["full"].runs.empty();
        const double exact_frac = md["full"].exact.mean();
        const double gain = md["full"].hit_rate.mean() - pre_hit_rate.mean();
        const bool ok = have && exact_frac >= 0.90 && gain >= 0.30 && max_full_seconds <= 300.0;
        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "exact holistic %.0f%%, hit-rate %.3f -> %.3f (gain %.3f), slowest sample "
                      "%.0fs, %d failed runs",
                      100.0 * exact_frac, pre_hit_rate.mean(), md["full"].hit_rate.mean(), gain,
                      max_full_seconds, failed_runs);
        report(3, ok, "edits take hold at both granularities", buf);
    }

    {  // criterion 4: ablation gaps
        const double hr_gap = md["full"].hit_rate.mean() - md["no_stage1"].hit_rate.mean();
        const double rouge_gap = md["full"].rouge.mean() - md["no_stage2"].rouge.mean();
        const bool ok = hr_gap >= 0.20 && rouge_gap >= 0.20;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "fine hit-rate gap %.3f (>=0.20), holistic overlap gap %.3f (>=0.20)",
                      hr_gap, rouge_gap);
        report(4, ok, "both stages carry weight", buf);
    }

    {  // criterion 5: stage one eases stage two
        int n = 0, init_better = 0, steps_better = 0;
        std::map<std::string, const SampleRun*> full_by_id, ns1_by_id;
        for (const auto* r : md["full"].runs) full_by_id[r->sample_id] = r;
        for (const auto* r : md["no_stage1"].runs) ns1_by_id[r->sample_id] = r;
        for (const auto& [id, fr] : full_by_id) {
            auto it = ns1_by_id.find(id);
            if (it == ns1_by_id.end()) continue;
            const auto& rf = fr->report.stage_two.residuals.at(0);
            const auto& rn = it->second->report.stage_two.residuals.at(0);
            ++n;
            if (rf.trajectory.front() >= rn.trajectory.front()) ++init_better;
            const int sf = rf.steps_to_threshold(cfg.prob_threshold);
            const int sn = rn.steps_to_threshold(cfg.prob_threshold);
            const bool f_reached = sf >= 0, n_reached = sn >= 0;
            if ((f_reached && !n_reached) || (f_reached && n_reached && sf <= sn) ||
                (!f_reached && !n_reached))
                ++steps_better;
        }
        const double fi = n ? static_cast<double>(init_better) / n : 0.0;
        const double fs = n ? static_cast<double>(steps_better) / n : 0.0;
        const bool ok = n > 0 && fi >= 0.70 && fs >= 0.70;
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "initial probability higher on %.0f%%, threshold reached no later on %.0f%% "
                      "of %d samples",
                      100.0 * fi, 100.0 * fs, n);
        report(5, ok, "stage one eases holistic integration", buf);
    }

    {  // criterion 6: locality
        const double loc = md["full"].locality.mean();
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.1f%% of irrelevant outputs unchanged", 100.0 * loc);
        report(6, loc >= 0.90, "irrelevant behavior is preserved", buf);
    }

    std::printf("# total wall time %.0fs\n", secs_since(t_all));
    if (g_failures == 0) std::printf("ALL CRITERIA PASS\n");
    else std::printf("%d CRITERIA FAILED\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
