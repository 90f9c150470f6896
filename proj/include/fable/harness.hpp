#pragma once

// Batch evaluation harness: per-sample edit/eval pipeline with strict
// isolation (every sample starts from a fresh copy of the base model),
// metric aggregation with standard errors, and CSV/JSON table output.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fable/dataset.hpp"
#include "fable/editing.hpp"
#include "fable/metrics.hpp"
#include "fable/train.hpp"

namespace fable {

struct SampleEval {
    MetricScores scores;
    std::string holistic_output;
    std::vector<std::string> fine_outputs;      // aligned with the expanded fine QAs
    std::vector<std::string> irrelevant_outputs;  // greedy outputs on irrelevant prompts
};

inline std::string answer_prompt_output(const TransformerLM& m, const CharTokenizer& tok,
                                        const std::string& question, int max_new) {
    return text::normalize(generate(m, tok, format_prompt(question), max_new));
}

// A model may emit end-of-sequence immediately, producing an empty candidate;
// that counts as zero overlap instead of a validation failure.
inline double lexical_or_zero(double (*metric)(const std::string&, const std::string&),
                              const std::string& candidate, const std::string& reference) {
    if (text::words(candidate).empty()) return 0.0;
    return metric(candidate, reference);
}

// Greedy-decodes every prompt of the sample and scores the outputs.
inline SampleEval evaluate_sample(const TransformerLM& model, const CharTokenizer& tok,
                                  const EditSample& sample, const std::string& provider = "bag-cosine",
                                  int max_new = 200) {
    SampleEval ev;
    ev.scores.semantic_provider = provider;
    ev.holistic_output = answer_prompt_output(model, tok, sample.question, max_new);
    ev.scores.holistic_lexical = lexical_or_zero(rouge_l_f, ev.holistic_output, sample.target_output);
    ev.scores.lcs_coverage = lcs_coverage(ev.holistic_output, sample.target_output);
    ev.scores.holistic_semantic =
        semantic_similarity(ev.holistic_output, sample.target_output, provider);
    double hr = 0.0, fl = 0.0, fs = 0.0;
    for (const auto& qa : sample.fine_qas) {
        const std::string out = answer_prompt_output(model, tok, qa.question, 64);
        ev.fine_outputs.push_back(out);
        hr += hit_rate(out, qa.key_phrases);
        fl += lexical_or_zero(rouge_l_f, out, qa.answer);
        fs += semantic_similarity(out, qa.answer, provider);
    }
    const double n = static_cast<double>(sample.fine_qas.size());
    ev.scores.hit_rate = hr / n;
    ev.scores.fine_lexical = fl / n;
    ev.scores.fine_semantic = fs / n;
    for (const auto& d : sample.irrelevant)
        ev.irrelevant_outputs.push_back(answer_prompt_output(model, tok, d, 64));
    return ev;
}

inline EditSample expand_sample(const EditSample& sample, int multiplier,
                                const ExtractionConfig& xcfg = {}) {
    EditSample s = sample;
    std::vector<FineQA> seeds;
    for (const auto& qa : sample.fine_qas)
        if (qa.seed) seeds.push_back(qa);
    if (seeds.empty()) seeds = sample.fine_qas;
    s.fine_qas = expand_questions(seeds, multiplier, xcfg);
    return s;
}

struct SampleRun {
    std::string sample_id;
    std::string mode;
    SampleEval pre, post;
    double locality_match = 0.0;    // fraction of irrelevant prompts with unchanged output
    bool holistic_exact = false;    // greedy output equals normalized target
    EditReport report;
    double wall_seconds = 0.0;
    bool failed = false;
    std::string error;
};

inline SampleRun run_sample(const TransformerLM& base, const CharTokenizer& tok,
                            const EditSample& raw_sample, const EditConfig& cfg, EditMode mode,
                            const std::string& provider = "bag-cosine") {
    SampleRun run;
    run.sample_id = raw_sample.id;
    run.mode = mode_name(mode);
    const auto start = std::chrono::steady_clock::now();
    try {
        EditSample sample = expand_sample(raw_sample, cfg.expansion_multiplier);
        TransformerLM model = base.clone();
        run.pre = evaluate_sample(model, tok, sample, provider);
        run.report = run_fable(model, tok, sample, cfg, mode);
        run.post = evaluate_sample(model, tok, sample, provider);
        run.holistic_exact = run.post.holistic_output == text::normalize(sample.target_output);
        int same = 0;
        for (size_t k = 0; k < run.pre.irrelevant_outputs.size(); ++k)
            if (run.pre.irrelevant_outputs[k] == run.post.irrelevant_outputs[k]) ++same;
        run.locality_match = run.pre.irrelevant_outputs.empty()
                                 ? 1.0
                                 : static_cast<double>(same) /
                                       static_cast<double>(run.pre.irrelevant_outputs.size());
    } catch (const std::exception& e) {
        run.failed = true;
        run.error = e.what();
    }
    run.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
}

// ---- aggregation ----

struct Aggregate {
    std::vector<double> values;
    void add(double v) { values.push_back(v); }
    double mean() const {
        if (values.empty()) return 0.0;
        double s = 0.0;
        for (double v : values) s += v;
        return s / static_cast<double>(values.size());
    }
    double standard_error() const {
        const size_t n = values.size();
        if (n < 2) return 0.0;
        const double m = mean();
        double ss = 0.0;
        for (double v : values) ss += (v - m) * (v - m);
        return std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
    }
};

struct ResultRow {
    std::string label;  // "Pre-edited", "full", "no_stage1", "no_stage2"
    std::map<std::string, Aggregate> metrics;
};

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols = {
        "hit_rate",        "fine_lexical",      "fine_semantic",   "holistic_lexical",
        "lcs_coverage",    "holistic_semantic", "holistic_exact",  "locality_match"};
    return cols;
}

inline void accumulate(ResultRow& row, const MetricScores& s) {
    row.metrics["hit_rate"].add(s.hit_rate);
    row.metrics["fine_lexical"].add(s.fine_lexical);
    row.metrics["fine_semantic"].add(s.fine_semantic);
    row.metrics["holistic_lexical"].add(s.holistic_lexical);
    row.metrics["lcs_coverage"].add(s.lcs_coverage);
    row.metrics["holistic_semantic"].add(s.holistic_semantic);
}

inline std::string format_mean_se(const Aggregate& a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f±%.4f", a.mean(), a.standard_error());
    return buf;
}

inline std::string rows_to_csv(const std::vector<ResultRow>& rows) {
    std::string out = "label";
    for (const auto& c : metric_columns()) out += "," + c;
    out += "\n";
    for (const auto& r : rows) {
        out += r.label;
        for (const auto& c : metric_columns()) {
            auto it = r.metrics.find(c);
            out += ",";
            if (it != r.metrics.end()) out += format_mean_se(it->second);
        }
        out += "\n";
    }
    return out;
}

inline nlohmann::json rows_to_json(const std::vector<ResultRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        row["label"] = r.label;
        for (const auto& c : metric_columns()) {
            auto it = r.metrics.find(c);
            if (it == r.metrics.end()) continue;
            row[c] = {{"mean", it->second.mean()},
                      {"standard_error", it->second.standard_error()},
                      {"n", it->second.values.size()}};
        }
        j.push_back(row);
    }
    return j;
}

struct BatchResult {
    std::vector<SampleRun> runs;
    std::vector<ResultRow> rows;  // "Pre-edited" first, then one row per mode
    int failures = 0;
};

// Runs every sample through every requested mode, each from a fresh copy of
// the base model, and aggregates metric rows. Failures are reported, never
// fatal for the batch.
inline BatchResult run_batch(const TransformerLM& base, const CharTokenizer& tok,
                             const std::vector<EditSample>& samples, const EditConfig& cfg,
                             const std::vector<EditMode>& modes,
                             const std::string& provider = "bag-cosine",
                             std::ostream* log = nullptr) {
    BatchResult batch;
    ResultRow pre_row{"Pre-edited", {}};
    std::vector<ResultRow> mode_rows;
    for (EditMode m : modes) mode_rows.push_back({mode_name(m), {}});
    for (const auto& sample : samples) {
        bool pre_done = false;
        for (size_t mi = 0; mi < modes.size(); ++mi) {
            SampleRun run = run_sample(base, tok, sample, cfg, modes[mi], provider);
            if (run.failed) {
                ++batch.failures;
                if (log)
                    *log << "FAIL sample " << run.sample_id << " mode " << run.mode << ": "
                         << run.error << "\n";
            } else {
                if (!pre_done) {
                    accumulate(pre_row, run.pre.scores);
                    pre_row.metrics["holistic_exact"].add(0.0);
                    pre_row.metrics["locality_match"].add(1.0);
                    pre_done = true;
                }
                accumulate(mode_rows[mi], run.post.scores);
                mode_rows[mi].metrics["holistic_exact"].add(run.holistic_exact ? 1.0 : 0.0);
                mode_rows[mi].metrics["locality_match"].add(run.locality_match);
                if (log)
                    *log << "ok sample " << run.sample_id << " mode " << run.mode << " ("
                         << run.wall_seconds << "s) hr=" << run.post.scores.hit_rate
                         << " rouge=" << run.post.scores.holistic_lexical << "\n";
            }
            batch.runs.push_back(std::move(run));
        }
    }
    batch.rows.push_back(std::move(pre_row));
    for (auto& r : mode_rows) batch.rows.push_back(std::move(r));
    if (log && batch.failures > 0)
        *log << batch.failures << " sample run(s) failed out of "
             << samples.size() * modes.size() << "\n";
    return batch;
}

// ---- trajectory CSV ----

inline std::string trajectories_to_csv(
    const std::vector<std::pair<std::string, TrajectoryComparison>>& items, uint64_t seed,
    const EditConfig& cfg) {
    std::string out = "sample_id,mode,step,probability\n";
    out += "# seed=" + std::to_string(seed) +
           " threshold=" + std::to_string(cfg.prob_threshold) +
           " delta_steps=" + std::to_string(cfg.delta_steps) +
           " delta_lr=" + std::to_string(cfg.delta_lr) + "\n";
    char buf[64];
    auto emit = [&](const std::string& id, const char* mode, const ResidualResult& r) {
        for (size_t i = 0; i < r.trajectory.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.12g", r.trajectory[i]);
            out += id;
            out += ",";
            out += mode;
            out += "," + std::to_string(i) + "," + buf + "\n";
        }
    };
    for (const auto& [id, cmp] : items) {
        emit(id, "full", cmp.full);
        emit(id, "no_stage1", cmp.no_stage1);
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << content;
}

}  // namespace fable
