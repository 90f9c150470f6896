#pragma once

// Two-stage hierarchical editing: residual-vector search at a chosen
// layer, Stage One distributed fine-grained anchoring across the edit
// layer set, Stage Two holistic integration at L_h with a fine-grained
// preservation term, ablation modes, and trajectory recording.

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fable/dataset.hpp"
#include "fable/lm.hpp"
#include "fable/optim.hpp"

namespace fable {

struct OptimizationDivergedError : std::runtime_error {
    OptimizationDivergedError(const std::string& m, int step)
        : std::runtime_error(m + " at step " + std::to_string(step)), step_index(step) {}
    int step_index;
};

struct TermWeights {
    double efficacy = 1.0;
    double prefix = 1.0;
    double locality = 1.0;
    double fine_preserve = 1.0;
};

// How the per-layer share of delta_f is formed in Stage One:
//  - kRecompute: remaining residual k* - h^{L_f} is recomputed from the
//    partially updated model and divided by the not-yet-updated edit-layer
//    count, so the shares compose to the full delta.
//  - kFrozenTrace: literal delta_f / (L_f - l + 1) over the pre-edit trace.
enum class ResidualSpreading { kRecompute, kFrozenTrace };

struct EditConfig {
    LayerPartition partition{6, 7};
    std::vector<int> edit_layer_set{4, 5, 6};
    int delta_steps = 120;
    double delta_lr = 0.05;
    int layer_steps = 60;
    double layer_lr = 2e-3;
    TermWeights weights;
    int expansion_multiplier = 5;
    int n_irrelevant = 20;
    int n_irrelevant_tokens = 32;  // w: positions per irrelevant sample in the locality term
    double prob_threshold = 0.9;   // reporting threshold for trajectory metrics
    double stop_threshold = 0.99;  // early-stop level for the residual search
    double eps_anchor_frac = 0.1;
    ResidualSpreading spreading = ResidualSpreading::kRecompute;
    bool literal_eq10_efficacy = false;  // keep the double-counted k_hol reading selectable
    uint64_t seed = 0;

    void validate(int n_layers) const {
        partition.validate(n_layers);
        if (edit_layer_set.empty()) throw ConfigError("EditConfig: edit_layer_set is empty");
        for (int l : edit_layer_set)
            if (l < 1 || l > partition.l_fine)
                throw ConfigError("EditConfig: edit layer " + std::to_string(l) +
                                  " outside [1, L_f]");
        if (expansion_multiplier < 1) throw ConfigError("EditConfig: multiplier must be >= 1");
        if (weights.efficacy < 0 || weights.prefix < 0 || weights.locality < 0 ||
            weights.fine_preserve < 0)
            throw ConfigError("EditConfig: term weights must be >= 0");
    }
};

struct ResidualResult {
    std::vector<double> delta;
    std::vector<double> trajectory;  // per-evaluation geometric-mean token probability
    bool converged = false;
    int steps_used = 0;              // number of recorded evaluations

    // index of the first trajectory point at/above the threshold, -1 if never
    int steps_to_threshold(double threshold) const {
        for (size_t i = 0; i < trajectory.size(); ++i)
            if (trajectory[i] >= threshold) return static_cast<int>(i);
        return -1;
    }
};

struct LayerLossTerms {
    int layer = 0;
    double efficacy = 0.0, prefix = 0.0, locality = 0.0, fine_preserve = 0.0;
    double total_initial = 0.0, total_final = 0.0;
};

struct AnchorCheck {
    double distance = 0.0;
    double delta_norm = 0.0;
    bool ok = true;
};

struct StageReport {
    std::vector<ResidualResult> residuals;
    std::vector<LayerLossTerms> layer_losses;
    std::vector<AnchorCheck> anchors;
    double wall_seconds = 0.0;
    bool ran = false;
};

struct EditReport {
    std::string mode = "full";
    StageReport stage_one, stage_two;
};

struct PreparedQA {
    std::vector<int> prompt;
    std::vector<int> target;  // includes the trailing EOS
};

namespace detail {

inline Tensor const_matrix(const std::vector<double>& values, int rows, int cols) {
    return Tensor::leaf({rows, cols}, values);
}

// Applies blocks from_layer+1 .. n_layers to a given layer-`from_layer`
// hidden state.
inline Tensor run_blocks_after(const TransformerLM& m, Tensor h, int from_layer,
                               const Tensor& mask) {
    for (int l = from_layer + 1; l <= m.cfg.n_layers; ++l)
        h = block_forward(m.blocks[static_cast<size_t>(l - 1)], h, m.cfg.n_heads, mask);
    return h;
}

inline double geometric_mean_prob(double nll, size_t target_len) {
    return std::exp(-nll / static_cast<double>(target_len));
}

}  // namespace detail

// Gradient search for the residual vector delta at (layer, last prompt
// position) minimizing the teacher-forced NLL of the target. Stops at the
// step budget or once the geometric-mean token probability reaches the
// threshold.
inline ResidualResult optimize_residual(const TransformerLM& model,
                                        const std::vector<int>& prompt,
                                        const std::vector<int>& target, int layer,
                                        const EditConfig& cfg) {
    if (layer < 1 || layer > model.cfg.n_layers)
        throw ContractError("optimize_residual: layer out of range");
    if (target.empty()) throw ContractError("optimize_residual: empty target");
    const int d = model.cfg.d_model;
    const int pos = static_cast<int>(prompt.size()) - 1;

    std::vector<int> toks = prompt;
    toks.insert(toks.end(), target.begin(), target.end());
    const int n = static_cast<int>(toks.size());

    // layers 1..layer never change while delta moves; freeze them once
    std::vector<double> h_layer_vals;
    {
        auto hs = forward_layers(model, toks);
        h_layer_vals = hs[static_cast<size_t>(layer)].values();
    }
    std::vector<double> key(h_layer_vals.begin() + static_cast<long>(pos) * d,
                            h_layer_vals.begin() + static_cast<long>(pos + 1) * d);

    Tensor delta = Tensor::zeros({d}, true);
    OptimizerState opt(cfg.delta_lr);
    ResidualResult res;
    Tensor key_const = Tensor::leaf({d}, key);
    Tensor mask = causal_mask(n);

    for (int step = 0;; ++step) {
        Tape tape;
        Tensor h = detail::const_matrix(h_layer_vals, n, d);
        Tensor vec = add(key_const, delta);
        h = substitute_row(h, pos, vec);
        h = detail::run_blocks_after(model, h, layer, mask);
        Tensor logits = logits_from_hidden(model, h);
        Tensor rows = slice(logits, 0, pos, static_cast<int>(target.size()));
        Tensor nll = nll_logits(rows, target);
        const double nll_value = nll.item();
        if (!std::isfinite(nll_value))
            throw OptimizationDivergedError("optimize_residual: loss is not finite", step);
        const double prob = detail::geometric_mean_prob(nll_value, target.size());
        res.trajectory.push_back(prob);
        if (prob >= cfg.stop_threshold) {
            res.converged = true;
            break;
        }
        if (step >= cfg.delta_steps) break;
        delta.zero_grad();
        backward(nll, tape);
        optimizer_step(opt, {delta});
    }
    res.steps_used = static_cast<int>(res.trajectory.size());
    res.delta = delta.values();
    return res;
}

namespace detail {

struct SeqState {
    std::vector<int> tokens;
    std::vector<double> input;   // h^{l-1} of the current model
    std::vector<double> ref;     // reference h^l states for consistency terms
    std::vector<double> target;  // last-token efficacy target (may be empty)
};

// One per-layer objective solve: move the last token of each efficacy
// sequence onto its target while holding reference positions in place.
// `prefix_counts[i]` gives how many leading positions of sequence i are
// anchored to `ref` (n-1 for prompts, all w for locality, n for
// fine-preservation).
inline LayerLossTerms optimize_layer(TransformerLM& model, int layer,
                                     const std::vector<SeqState>& seqs,
                                     const std::vector<int>& anchored_counts,
                                     const std::vector<int>& term_of_seq,
                                     const TermWeights& w, int steps, double lr) {
    const int d = model.cfg.d_model;
    auto params = model.layer_parameters(layer);
    for (auto& p : params) p.n->requires_grad = true;
    OptimizerState opt(lr);
    LayerLossTerms out;
    out.layer = layer;

    for (int step = 0; step <= steps; ++step) {
        Tape tape;
        Tensor eff = Tensor::scalar(0.0);
        Tensor prefix = Tensor::scalar(0.0);
        Tensor locality = Tensor::scalar(0.0);
        Tensor fine_pres = Tensor::scalar(0.0);
        for (size_t i = 0; i < seqs.size(); ++i) {
            const auto& s = seqs[i];
            const int n = static_cast<int>(s.tokens.size());
            Tensor mask = causal_mask(n);
            Tensor in = const_matrix(s.input, n, d);
            Tensor outh = block_forward(model.blocks[static_cast<size_t>(layer - 1)], in,
                                        model.cfg.n_heads, mask);
            if (!s.target.empty()) {
                Tensor t = Tensor::leaf({d}, s.target);
                eff = add(eff, squared_norm(sub(row(outh, n - 1), t)));
            }
            const int anchored = anchored_counts[i];
            if (anchored > 0) {
                Tensor refm = const_matrix(
                    {s.ref.begin(), s.ref.begin() + static_cast<long>(anchored) * d}, anchored, d);
                Tensor diff = sub(slice(outh, 0, 0, anchored), refm);
                Tensor term = squared_norm(diff);
                if (term_of_seq[i] == 0)
                    prefix = add(prefix, term);
                else if (term_of_seq[i] == 1)
                    locality = add(locality, term);
                else
                    fine_pres = add(fine_pres, term);
            }
        }
        Tensor loss = add(add(scale(eff, w.efficacy), scale(prefix, w.prefix)),
                          add(scale(locality, w.locality), scale(fine_pres, w.fine_preserve)));
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw OptimizationDivergedError(
                "layer " + std::to_string(layer) + " objective is not finite", step);
        if (step == 0) out.total_initial = loss_value;
        out.efficacy = eff.item();
        out.prefix = prefix.item();
        out.locality = locality.item();
        out.fine_preserve = fine_pres.item();
        out.total_final = loss_value;
        if (step == steps) break;
        zero_grads(params);
        backward(loss, tape);
        optimizer_step(opt, params);
    }
    return out;
}

inline std::vector<double> layer_values(const TransformerLM& m, const std::vector<int>& toks,
                                        int layer) {
    auto hs = forward_layers(m, toks);
    return hs[static_cast<size_t>(layer)].values();
}

inline std::vector<double> last_row(const std::vector<double>& mat, int n, int d) {
    return {mat.begin() + static_cast<long>(n - 1) * d, mat.end()};
}

}  // namespace detail

// Stage One: distributed fine-grained anchoring. Mutates only the
// parameters of layers in cfg.edit_layer_set.
inline StageReport stage_one_edit(TransformerLM& model, const std::vector<PreparedQA>& fine_qas,
                                  const std::vector<std::vector<int>>& irrelevant,
                                  const EditConfig& cfg) {
    cfg.validate(model.cfg.n_layers);
    if (fine_qas.empty()) throw ContractError("stage_one_edit: fine_qas is empty");
    const auto start = std::chrono::steady_clock::now();
    const int d = model.cfg.d_model;
    const int lf = cfg.partition.l_fine;
    StageReport rep;
    rep.ran = true;

    std::vector<int> edit_layers = cfg.edit_layer_set;
    std::sort(edit_layers.begin(), edit_layers.end());

    // residual search per fine QA on the entry model
    std::vector<std::vector<double>> key_star(fine_qas.size());
    std::vector<std::vector<double>> deltas(fine_qas.size());
    for (size_t i = 0; i < fine_qas.size(); ++i) {
        ResidualResult r;
        try {
            r = optimize_residual(model, fine_qas[i].prompt, fine_qas[i].target, lf, cfg);
        } catch (const OptimizationDivergedError& e) {
            throw OptimizationDivergedError(std::string("stage one: ") + e.what(), e.step_index);
        }
        auto h = detail::layer_values(model, fine_qas[i].prompt, lf);
        auto key = detail::last_row(h, static_cast<int>(fine_qas[i].prompt.size()), d);
        key_star[i].resize(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) key_star[i][static_cast<size_t>(j)] = key[static_cast<size_t>(j)] + r.delta[static_cast<size_t>(j)];
        deltas[i] = r.delta;
        rep.residuals.push_back(std::move(r));
    }

    // pre-edit reference states per edit layer (prefix + locality terms)
    std::vector<std::vector<int>> irr_tokens;
    for (const auto& ir : irrelevant) {
        std::vector<int> t = ir;
        if (cfg.n_irrelevant_tokens > 0 && static_cast<int>(t.size()) > cfg.n_irrelevant_tokens)
            t.resize(static_cast<size_t>(cfg.n_irrelevant_tokens));
        irr_tokens.push_back(std::move(t));
    }
    std::map<int, std::vector<std::vector<double>>> pre_qa_refs, pre_irr_refs;
    std::map<int, std::vector<std::vector<double>>> pre_qa_inputs;  // for frozen-trace mode
    for (size_t i = 0; i < fine_qas.size(); ++i) {
        auto hs = forward_layers(model, fine_qas[i].prompt);
        for (int l : edit_layers) {
            pre_qa_refs[l].push_back(hs[static_cast<size_t>(l)].values());
            pre_qa_inputs[l].push_back(hs[static_cast<size_t>(l - 1)].values());
        }
    }
    std::map<int, std::vector<std::vector<double>>> pre_irr_inputs;
    for (const auto& t : irr_tokens) {
        auto hs = forward_layers(model, t);
        for (int l : edit_layers) {
            pre_irr_refs[l].push_back(hs[static_cast<size_t>(l)].values());
            pre_irr_inputs[l].push_back(hs[static_cast<size_t>(l - 1)].values());
        }
    }

    for (size_t li = 0; li < edit_layers.size(); ++li) {
        const int l = edit_layers[li];
        const int remaining = static_cast<int>(edit_layers.size() - li);
        std::vector<detail::SeqState> seqs;
        std::vector<int> anchored, term;
        for (size_t i = 0; i < fine_qas.size(); ++i) {
            const auto& toks = fine_qas[i].prompt;
            const int n = static_cast<int>(toks.size());
            detail::SeqState s;
            s.tokens = toks;
            if (cfg.spreading == ResidualSpreading::kRecompute) {
                auto hs = forward_layers(model, toks);  // partially updated model
                s.input = hs[static_cast<size_t>(l - 1)].values();
                auto h_lf = detail::last_row(hs[static_cast<size_t>(lf)].values(), n, d);
                auto h_l = detail::last_row(hs[static_cast<size_t>(l)].values(), n, d);
                s.target.resize(static_cast<size_t>(d));
                for (int j = 0; j < d; ++j)
                    s.target[static_cast<size_t>(j)] =
                        h_l[static_cast<size_t>(j)] +
                        (key_star[i][static_cast<size_t>(j)] - h_lf[static_cast<size_t>(j)]) / remaining;
            } else {
                s.input = pre_qa_inputs[l][i];
                auto h_l = detail::last_row(pre_qa_refs[l][i], n, d);
                const double denom = static_cast<double>(lf - l + 1);
                s.target.resize(static_cast<size_t>(d));
                for (int j = 0; j < d; ++j)
                    s.target[static_cast<size_t>(j)] =
                        h_l[static_cast<size_t>(j)] + deltas[i][static_cast<size_t>(j)] / denom;
            }
            s.ref = pre_qa_refs[l][i];
            seqs.push_back(std::move(s));
            anchored.push_back(n - 1);
            term.push_back(0);
        }
        for (size_t k = 0; k < irr_tokens.size(); ++k) {
            detail::SeqState s;
            s.tokens = irr_tokens[k];
            if (cfg.spreading == ResidualSpreading::kRecompute)
                s.input = detail::layer_values(model, irr_tokens[k], l - 1);
            else
                s.input = pre_irr_inputs[l][k];
            s.ref = pre_irr_refs[l][k];
            seqs.push_back(std::move(s));
            anchored.push_back(static_cast<int>(irr_tokens[k].size()));
            term.push_back(1);
        }
        try {
            rep.layer_losses.push_back(detail::optimize_layer(model, l, seqs, anchored, term,
                                                              cfg.weights, cfg.layer_steps,
                                                              cfg.layer_lr));
        } catch (const OptimizationDivergedError& e) {
            throw OptimizationDivergedError("stage one diverged at layer " + std::to_string(l),
                                            e.step_index);
        }
    }

    // anchor post-condition: realized keys land within eps of their targets
    for (size_t i = 0; i < fine_qas.size(); ++i) {
        const int n = static_cast<int>(fine_qas[i].prompt.size());
        auto h = detail::layer_values(model, fine_qas[i].prompt, lf);
        auto key_hat = detail::last_row(h, n, d);
        AnchorCheck a;
        double dist2 = 0.0, dn2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double e = key_hat[static_cast<size_t>(j)] - key_star[i][static_cast<size_t>(j)];
            dist2 += e * e;
            dn2 += deltas[i][static_cast<size_t>(j)] * deltas[i][static_cast<size_t>(j)];
        }
        a.distance = std::sqrt(dist2);
        a.delta_norm = std::sqrt(dn2);
        a.ok = a.delta_norm == 0.0 ? a.distance == 0.0
                                   : a.distance <= cfg.eps_anchor_frac * a.delta_norm;
        rep.anchors.push_back(a);
    }
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

// Stage Two: holistic integration at L_h only, with fine-grained
// preservation anchoring every position of every fine prompt.
inline StageReport stage_two_edit(TransformerLM& model, const PreparedQA& holistic,
                                  const std::vector<PreparedQA>& fine_qas,
                                  const std::vector<std::vector<int>>& irrelevant,
                                  const EditConfig& cfg) {
    cfg.validate(model.cfg.n_layers);
    const auto start = std::chrono::steady_clock::now();
    const int d = model.cfg.d_model;
    const int lh = cfg.partition.l_hol;
    StageReport rep;
    rep.ran = true;

    ResidualResult r;
    try {
        r = optimize_residual(model, holistic.prompt, holistic.target, lh, cfg);
    } catch (const OptimizationDivergedError& e) {
        throw OptimizationDivergedError(std::string("stage two: ") + e.what(), e.step_index);
    }

    const int nh = static_cast<int>(holistic.prompt.size());
    auto entry_h = detail::layer_values(model, holistic.prompt, lh);
    auto k_hol = detail::last_row(entry_h, nh, d);
    std::vector<double> target(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) {
        const double k_star = k_hol[static_cast<size_t>(j)] + r.delta[static_cast<size_t>(j)];
        // literal Eq-10 reading doubles the base state: target = h + k*_hol
        target[static_cast<size_t>(j)] =
            cfg.literal_eq10_efficacy ? k_hol[static_cast<size_t>(j)] + k_star : k_star;
    }
    rep.residuals.push_back(r);

    std::vector<detail::SeqState> seqs;
    std::vector<int> anchored, term;
    {
        detail::SeqState s;
        s.tokens = holistic.prompt;
        s.input = detail::layer_values(model, holistic.prompt, lh - 1);
        s.ref = entry_h;
        s.target = target;
        seqs.push_back(std::move(s));
        anchored.push_back(nh - 1);
        term.push_back(0);
    }
    for (const auto& ir : irrelevant) {
        std::vector<int> t = ir;
        if (cfg.n_irrelevant_tokens > 0 && static_cast<int>(t.size()) > cfg.n_irrelevant_tokens)
            t.resize(static_cast<size_t>(cfg.n_irrelevant_tokens));
        detail::SeqState s;
        s.tokens = t;
        s.input = detail::layer_values(model, t, lh - 1);
        s.ref = detail::layer_values(model, t, lh);
        seqs.push_back(std::move(s));
        anchored.push_back(static_cast<int>(t.size()));
        term.push_back(1);
    }
    for (const auto& qa : fine_qas) {
        detail::SeqState s;
        s.tokens = qa.prompt;
        s.input = detail::layer_values(model, qa.prompt, lh - 1);
        s.ref = detail::layer_values(model, qa.prompt, lh);  // post-Stage-One states
        seqs.push_back(std::move(s));
        anchored.push_back(static_cast<int>(qa.prompt.size()));  // all n positions
        term.push_back(2);
    }
    try {
        rep.layer_losses.push_back(detail::optimize_layer(model, lh, seqs, anchored, term,
                                                          cfg.weights, cfg.layer_steps,
                                                          cfg.layer_lr));
    } catch (const OptimizationDivergedError& e) {
        throw OptimizationDivergedError("stage two diverged at layer " + std::to_string(lh),
                                        e.step_index);
    }

    {
        auto h = detail::layer_values(model, holistic.prompt, lh);
        auto key_hat = detail::last_row(h, nh, d);
        AnchorCheck a;
        double dist2 = 0.0, dn2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double k_star = k_hol[static_cast<size_t>(j)] + r.delta[static_cast<size_t>(j)];
            const double e = key_hat[static_cast<size_t>(j)] - k_star;
            dist2 += e * e;
            dn2 += r.delta[static_cast<size_t>(j)] * r.delta[static_cast<size_t>(j)];
        }
        a.distance = std::sqrt(dist2);
        a.delta_norm = std::sqrt(dn2);
        a.ok = a.delta_norm == 0.0 ? a.distance == 0.0
                                   : a.distance <= cfg.eps_anchor_frac * a.delta_norm;
        rep.anchors.push_back(a);
    }
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

enum class EditMode { kFull, kNoStage1, kNoStage2 };

inline std::string mode_name(EditMode m) {
    switch (m) {
        case EditMode::kFull: return "full";
        case EditMode::kNoStage1: return "no_stage1";
        case EditMode::kNoStage2: return "no_stage2";
    }
    return "?";
}

inline EditMode mode_from_name(const std::string& s) {
    if (s == "full") return EditMode::kFull;
    if (s == "no_stage1") return EditMode::kNoStage1;
    if (s == "no_stage2") return EditMode::kNoStage2;
    throw ConfigError("unknown edit mode '" + s + "'");
}

// Prompt/target formatting shared by editing, evaluation, and pretraining.
inline std::string format_prompt(const std::string& question) {
    return "q: " + text::normalize(question) + " a:";
}

// The prompt extends through the separator space after "a:", so the key
// position is the one whose next-token logits pick the first answer
// character.  The target therefore starts directly with the answer text.
inline PreparedQA prepare_qa(const CharTokenizer& tok, const std::string& question,
                             const std::string& answer, bool terminal_period = true) {
    PreparedQA p;
    p.prompt = tok.tokenize(format_prompt(question));
    const auto space = tok.alphabet().find(' ');
    if (space == std::string::npos) throw ContractError("prepare_qa: alphabet lacks a space");
    p.prompt.push_back(static_cast<int>(space) + 2);
    std::string t = text::normalize(answer);
    if (t.empty()) throw ContractError("prepare_qa: empty answer");
    if (terminal_period && t.back() != '.') t += " .";
    p.target = tok.tokenize(t);
    p.target.push_back(CharTokenizer::kEosId);
    return p;
}

// The full two-stage procedure (or an ablation of it) on an expanded,
// validated sample. Mutates `model` in place.
inline EditReport run_fable(TransformerLM& model, const CharTokenizer& tok,
                            const EditSample& sample, const EditConfig& cfg, EditMode mode) {
    cfg.validate(model.cfg.n_layers);
    std::vector<PreparedQA> fine;
    for (const auto& qa : sample.fine_qas) fine.push_back(prepare_qa(tok, qa.question, qa.answer));
    PreparedQA holistic = prepare_qa(tok, sample.question, sample.target_output, false);
    std::vector<std::vector<int>> irrelevant;
    for (const auto& dprompt : sample.irrelevant)
        irrelevant.push_back(tok.tokenize(format_prompt(dprompt)));

    EditReport report;
    report.mode = mode_name(mode);
    if (mode != EditMode::kNoStage1)
        report.stage_one = stage_one_edit(model, fine, irrelevant, cfg);
    if (mode != EditMode::kNoStage2)
        report.stage_two = stage_two_edit(model, holistic, fine, irrelevant, cfg);
    return report;
}

struct TrajectoryComparison {
    ResidualResult full;
    ResidualResult no_stage1;
    int full_steps_to_threshold = -1;       // -1 encodes "never reached"
    int no_stage1_steps_to_threshold = -1;
};

// Stage-Two residual trajectories with and without Stage One, from two
// independent copies of the pre-edit model.
inline TrajectoryComparison trajectory_compare(const TransformerLM& base,
                                               const CharTokenizer& tok, const EditSample& sample,
                                               const EditConfig& cfg) {
    TrajectoryComparison out;
    {
        TransformerLM m = base.clone();
        EditReport r = run_fable(m, tok, sample, cfg, EditMode::kFull);
        out.full = r.stage_two.residuals.at(0);
    }
    {
        TransformerLM m = base.clone();
        EditReport r = run_fable(m, tok, sample, cfg, EditMode::kNoStage1);
        out.no_stage1 = r.stage_two.residuals.at(0);
    }
    out.full_steps_to_threshold = out.full.steps_to_threshold(cfg.prob_threshold);
    out.no_stage1_steps_to_threshold = out.no_stage1.steps_to_threshold(cfg.prob_threshold);
    return out;
}

// ---- report / config serialization ----

inline nlohmann::json edit_config_to_json(const EditConfig& c) {
    return {{"l_fine", c.partition.l_fine},
            {"l_hol", c.partition.l_hol},
            {"edit_layer_set", c.edit_layer_set},
            {"delta_steps", c.delta_steps},
            {"delta_lr", c.delta_lr},
            {"layer_steps", c.layer_steps},
            {"layer_lr", c.layer_lr},
            {"w_efficacy", c.weights.efficacy},
            {"w_prefix", c.weights.prefix},
            {"w_locality", c.weights.locality},
            {"w_fine_preserve", c.weights.fine_preserve},
            {"expansion_multiplier", c.expansion_multiplier},
            {"n_irrelevant", c.n_irrelevant},
            {"n_irrelevant_tokens", c.n_irrelevant_tokens},
            {"prob_threshold", c.prob_threshold},
            {"stop_threshold", c.stop_threshold},
            {"eps_anchor_frac", c.eps_anchor_frac},
            {"spreading", c.spreading == ResidualSpreading::kRecompute ? "recompute" : "frozen"},
            {"literal_eq10_efficacy", c.literal_eq10_efficacy},
            {"seed", c.seed}};
}

inline EditConfig edit_config_from_json(const nlohmann::json& j, EditConfig base = {}) {
    EditConfig c = base;
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
    };
    opt("l_fine", c.partition.l_fine);
    opt("l_hol", c.partition.l_hol);
    opt("edit_layer_set", c.edit_layer_set);
    opt("delta_steps", c.delta_steps);
    opt("delta_lr", c.delta_lr);
    opt("layer_steps", c.layer_steps);
    opt("layer_lr", c.layer_lr);
    opt("w_efficacy", c.weights.efficacy);
    opt("w_prefix", c.weights.prefix);
    opt("w_locality", c.weights.locality);
    opt("w_fine_preserve", c.weights.fine_preserve);
    opt("expansion_multiplier", c.expansion_multiplier);
    opt("n_irrelevant", c.n_irrelevant);
    opt("n_irrelevant_tokens", c.n_irrelevant_tokens);
    opt("prob_threshold", c.prob_threshold);
    opt("stop_threshold", c.stop_threshold);
    opt("eps_anchor_frac", c.eps_anchor_frac);
    opt("literal_eq10_efficacy", c.literal_eq10_efficacy);
    opt("seed", c.seed);
    if (j.contains("spreading")) {
        const std::string s = j.at("spreading").get<std::string>();
        if (s == "recompute")
            c.spreading = ResidualSpreading::kRecompute;
        else if (s == "frozen")
            c.spreading = ResidualSpreading::kFrozenTrace;
        else
            throw ConfigError("unknown spreading mode '" + s + "'");
    }
    return c;
}

inline nlohmann::json residual_to_json(const ResidualResult& r) {
    return {{"trajectory", r.trajectory},
            {"converged", r.converged},
            {"steps_used", r.steps_used}};
}

inline nlohmann::json stage_to_json(const StageReport& s) {
    nlohmann::json j;
    j["ran"] = s.ran;
    j["wall_seconds"] = s.wall_seconds;
    j["residuals"] = nlohmann::json::array();
    for (const auto& r : s.residuals) j["residuals"].push_back(residual_to_json(r));
    j["layers"] = nlohmann::json::array();
    for (const auto& l : s.layer_losses)
        j["layers"].push_back({{"layer", l.layer},
                               {"efficacy", l.efficacy},
                               {"prefix", l.prefix},
                               {"locality", l.locality},
                               {"fine_preserve", l.fine_preserve},
                               {"total_initial", l.total_initial},
                               {"total_final", l.total_final}});
    j["anchors"] = nlohmann::json::array();
    for (const auto& a : s.anchors)
        j["anchors"].push_back(
            {{"distance", a.distance}, {"delta_norm", a.delta_norm}, {"ok", a.ok}});
    return j;
}

inline nlohmann::json report_to_json(const EditReport& r, const EditConfig& cfg) {
    return {{"mode", r.mode},
            {"config", edit_config_to_json(cfg)},
            {"stage_one", stage_to_json(r.stage_one)},
            {"stage_two", stage_to_json(r.stage_two)}};
}

}  // namespace fable
