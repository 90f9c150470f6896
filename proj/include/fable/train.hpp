#pragma once

// Toy-scale pretraining over a line corpus, plus versioned JSON
// checkpoints (config, vocabulary, parameter arrays; bit-exact round trip).

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fable/lm.hpp"
#include "fable/optim.hpp"

namespace fable {

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& m, long step)
        : std::runtime_error(m + " at step " + std::to_string(step)), step_index(step) {}
    long step_index;
};

struct TrainResult {
    TransformerLM model;
    std::vector<double> loss_history;  // mean per-token NLL per step
};

// Next-token training over whole lines (each line is one sequence ending in
// EOS). Deterministic under (seed, config, corpus).
inline TrainResult train_toy_lm(const std::vector<std::string>& corpus, const LMConfig& cfg,
                                int steps, double lr = 3e-3, int batch_size = 4) {
    if (corpus.empty()) throw ContractError("train_toy_lm: corpus must be non-empty");
    CharTokenizer tok;
    LMConfig c = cfg;
    c.vocab_size = tok.vocab_size();
    TransformerLM model = TransformerLM::init(c);
    auto params = model.parameters();

    std::vector<std::vector<int>> lines;
    for (const auto& s : corpus) {
        auto ids = tok.tokenize(s);
        ids.push_back(CharTokenizer::kEosId);
        if (static_cast<int>(ids.size()) > c.max_seq_len)
            throw ContractError("train_toy_lm: corpus line exceeds max_seq_len");
        if (ids.size() >= 2) lines.push_back(std::move(ids));
    }

    OptimizerState opt(lr);
    std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<size_t> pick(0, lines.size() - 1);
    std::vector<double> history;
    history.reserve(static_cast<size_t>(steps));

    for (int step = 0; step < steps; ++step) {
        // linear decay to 10% of the initial rate sharpens late-stage memorization
        opt.lr = lr * (1.0 - 0.9 * static_cast<double>(step) / static_cast<double>(steps));
        Tape tape;
        Tensor total = Tensor::scalar(0.0);
        int token_count = 0;
        for (int b = 0; b < batch_size; ++b) {
            const auto& line = lines[pick(rng)];
            auto hs = forward_layers(model, line);
            Tensor logits = logits_from_hidden(model, hs.back());
            const int m = static_cast<int>(line.size()) - 1;
            std::vector<int> targets(line.begin() + 1, line.end());
            total = add(total, nll_logits(slice(logits, 0, 0, m), targets));
            token_count += m;
        }
        Tensor loss = scale(total, 1.0 / token_count);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw TrainingError("train_toy_lm: loss diverged", step);
        zero_grads(params);
        backward(loss, tape);
        optimizer_step(opt, params);
        history.push_back(loss_value);
    }
    return TrainResult{std::move(model), std::move(history)};
}

// ---- checkpoint I/O ----

inline nlohmann::json config_to_json(const LMConfig& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

inline LMConfig config_from_json(const nlohmann::json& j) {
    LMConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

namespace detail {
inline void for_each_param(TransformerLM& m,
                           const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("tok_emb", m.tok_emb);
    fn("pos_emb", m.pos_emb);
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        auto& b = m.blocks[l];
        const std::string pre = "block" + std::to_string(l + 1) + ".";
        fn(pre + "ln1_g", b.ln1_g);
        fn(pre + "ln1_b", b.ln1_b);
        fn(pre + "wq", b.wq);
        fn(pre + "wk", b.wk);
        fn(pre + "wv", b.wv);
        fn(pre + "wo", b.wo);
        fn(pre + "ln2_g", b.ln2_g);
        fn(pre + "ln2_b", b.ln2_b);
        fn(pre + "w1", b.w1);
        fn(pre + "b1", b.b1);
        fn(pre + "w2", b.w2);
        fn(pre + "b2", b.b2);
    }
    fn("lnf_g", m.lnf_g);
    fn("lnf_b", m.lnf_b);
    fn("w_out", m.w_out);
}
}  // namespace detail

inline nlohmann::json checkpoint_to_json(const TransformerLM& model,
                                         const CharTokenizer& tok = CharTokenizer()) {
    nlohmann::json j;
    j["version"] = 1;
    j["config"] = config_to_json(model.cfg);
    j["alphabet"] = tok.alphabet();
    nlohmann::json params = nlohmann::json::object();
    auto& m = const_cast<TransformerLM&>(model);
    detail::for_each_param(m, [&](const std::string& name, Tensor& t) {
        params[name] = {{"shape", t.shape()}, {"values", t.values()}};
    });
    j["params"] = std::move(params);
    return j;
}

inline TransformerLM checkpoint_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || j.at("version").get<int>() != 1)
        throw ContractError("checkpoint: unsupported or missing version");
    LMConfig cfg = config_from_json(j.at("config"));
    TransformerLM m = TransformerLM::init(cfg);
    const auto& params = j.at("params");
    detail::for_each_param(m, [&](const std::string& name, Tensor& t) {
        const auto& e = params.at(name);
        Shape shape = e.at("shape").get<Shape>();
        auto values = e.at("values").get<std::vector<double>>();
        if (shape != t.shape())
            throw ContractError("checkpoint: shape mismatch for parameter " + name);
        if (values.size() != t.values().size())
            throw ContractError("checkpoint: value count mismatch for parameter " + name);
        t.values() = std::move(values);
    });
    return m;
}

inline void save_checkpoint(const TransformerLM& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ContractError("save_checkpoint: cannot open " + path);
    out << checkpoint_to_json(model).dump();
}

inline TransformerLM load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("load_checkpoint: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

}  // namespace fable
