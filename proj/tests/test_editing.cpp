#include <doctest.h>

#include "fable/editing.hpp"

using namespace fable;

namespace {

LMConfig tiny_config(uint64_t seed = 21) {
    LMConfig c;
    c.n_layers = 4;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 64;
    c.seed = seed;
    return c;
}

EditConfig tiny_edit_config() {
    EditConfig c;
    c.partition = {2, 3};
    c.edit_layer_set = {1, 2};
    c.delta_steps = 60;
    c.delta_lr = 0.08;
    c.layer_steps = 25;
    c.layer_lr = 3e-3;
    c.n_irrelevant_tokens = 12;
    return c;
}

std::vector<std::vector<double>> snapshot(const TransformerLM& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters()) out.push_back(p.values());
    return out;
}

}  // namespace

TEST_CASE("residual search improves the target probability and reports honestly") {
    auto m = TransformerLM::init(tiny_config());
    CharTokenizer tok;
    auto qa = prepare_qa(tok, "where was bo born ?", "tasu");
    auto cfg = tiny_edit_config();
    auto r = optimize_residual(m, qa.prompt, qa.target, cfg.partition.l_fine, cfg);
    REQUIRE(!r.trajectory.empty());
    CHECK(r.steps_used == static_cast<int>(r.trajectory.size()));
    CHECK(r.trajectory.back() > r.trajectory.front());
    CHECK(r.delta.size() == static_cast<size_t>(m.cfg.d_model));
    if (r.converged) {
        CHECK(r.trajectory.back() >= cfg.stop_threshold);
        CHECK(r.steps_to_threshold(cfg.stop_threshold) == r.steps_used - 1);
    } else {
        CHECK(r.steps_used == cfg.delta_steps + 1);
    }
}

TEST_CASE("the final trajectory point is reproducible from the returned delta") {
    auto m = TransformerLM::init(tiny_config(5));
    CharTokenizer tok;
    auto qa = prepare_qa(tok, "what does bo own ?", "redo");
    auto cfg = tiny_edit_config();
    cfg.delta_steps = 30;
    const int layer = cfg.partition.l_fine;
    auto r = optimize_residual(m, qa.prompt, qa.target, layer, cfg);

    auto trace = forward_with_trace(m, qa.prompt);
    auto key = trace.at(layer, static_cast<int>(qa.prompt.size()) - 1);
    std::vector<double> vec(key.size());
    for (size_t i = 0; i < key.size(); ++i) vec[i] = key[i] + r.delta[i];
    const double nll = sequence_nll(m, qa.prompt, qa.target, std::make_pair(layer, vec));
    const double prob = std::exp(-nll / static_cast<double>(qa.target.size()));
    CHECK(prob == doctest::Approx(r.trajectory.back()).epsilon(1e-9));
}

TEST_CASE("a zero step budget returns a zero delta and one evaluation") {
    auto m = TransformerLM::init(tiny_config());
    CharTokenizer tok;
    auto qa = prepare_qa(tok, "where does bo live ?", "mira");
    auto cfg = tiny_edit_config();
    cfg.delta_steps = 0;
    auto r = optimize_residual(m, qa.prompt, qa.target, 2, cfg);
    CHECK(r.steps_used == 1);
    for (double d : r.delta) CHECK(d == 0.0);
    // the recorded point equals the unmodified model's probability
    const double nll = sequence_nll(m, qa.prompt, qa.target);
    CHECK(r.trajectory[0] ==
          doctest::Approx(std::exp(-nll / static_cast<double>(qa.target.size()))).epsilon(1e-12));
}

TEST_CASE("residual search stops early once the threshold is reached") {
    auto m = TransformerLM::init(tiny_config());
    CharTokenizer tok;
    auto qa = prepare_qa(tok, "where was bo born ?", "tasu");
    auto cfg = tiny_edit_config();
    cfg.stop_threshold = 0.0;  // already satisfied at the first evaluation
    auto r = optimize_residual(m, qa.prompt, qa.target, 2, cfg);
    CHECK(r.converged);
    CHECK(r.steps_used == 1);
    for (double d : r.delta) CHECK(d == 0.0);
}

TEST_CASE("a satisfied threshold makes both stages an exact no-op") {
    auto m = TransformerLM::init(tiny_config(9));
    CharTokenizer tok;
    EditSample s;
    s.id = "noop";
    s.question = "tell me about bo do .";
    s.target_output = "bo do was born in tasu .";
    s.fine_qas = {{"where was bo do born ?", "tasu", {"tasu"}, true, 0}};
    s.irrelevant = {"where was zu born ?", "what does ka own ?"};
    auto cfg = tiny_edit_config();
    cfg.stop_threshold = 0.0;  // zero residuals -> targets equal current states
    cfg.expansion_multiplier = 1;
    auto before = snapshot(m);
    auto report = run_fable(m, tok, s, cfg, EditMode::kFull);
    auto after = snapshot(m);
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
    CHECK(report.stage_one.layer_losses[0].total_initial == 0.0);
    for (const auto& a : report.stage_one.anchors) CHECK(a.ok);
}

TEST_CASE("stage one mutates exactly the edit layer set") {
    auto m = TransformerLM::init(tiny_config(31));
    CharTokenizer tok;
    std::vector<PreparedQA> fine = {prepare_qa(tok, "where was bo do born ?", "tasu")};
    std::vector<std::vector<int>> irr = {tok.tokenize(format_prompt("where was zu born ?"))};
    auto cfg = tiny_edit_config();
    cfg.layer_steps = 8;
    auto before = snapshot(m);
    auto rep = stage_one_edit(m, fine, irr, cfg);
    CHECK(rep.ran);
    auto after = snapshot(m);
    // parameter order: tok_emb, pos_emb, 12 per block, lnf_g, lnf_b, w_out
    auto block_range = [&](int l) {
        const size_t start = 2 + static_cast<size_t>(l - 1) * 12;
        return std::make_pair(start, start + 12);
    };
    std::set<size_t> editable;
    for (int l : cfg.edit_layer_set) {
        auto [lo, hi] = block_range(l);
        for (size_t i = lo; i < hi; ++i) editable.insert(i);
    }
    for (size_t i = 0; i < before.size(); ++i) {
        if (editable.count(i))
            CHECK(before[i] != after[i]);
        else
            CHECK(before[i] == after[i]);  // bit-exact outside the edit set
    }
}

TEST_CASE("stage two mutates only the holistic layer") {
    auto m = TransformerLM::init(tiny_config(32));
    CharTokenizer tok;
    PreparedQA hol = prepare_qa(tok, "tell me about bo do .", "bo do was born in tasu", false);
    std::vector<PreparedQA> fine = {prepare_qa(tok, "where was bo do born ?", "tasu")};
    std::vector<std::vector<int>> irr = {tok.tokenize(format_prompt("where was zu born ?"))};
    auto cfg = tiny_edit_config();
    cfg.layer_steps = 8;
    auto before = snapshot(m);
    auto rep = stage_two_edit(m, hol, fine, irr, cfg);
    auto after = snapshot(m);
    const size_t lo = 2 + static_cast<size_t>(cfg.partition.l_hol - 1) * 12, hi = lo + 12;
    for (size_t i = 0; i < before.size(); ++i) {
        if (i >= lo && i < hi)
            CHECK(before[i] != after[i]);
        else
            CHECK(before[i] == after[i]);
    }
    REQUIRE(rep.layer_losses.size() == 1);
    CHECK(rep.layer_losses[0].layer == cfg.partition.l_hol);
    CHECK(rep.layer_losses[0].total_final <= rep.layer_losses[0].total_initial);
}

TEST_CASE("editing lowers the edited answers' NLL") {
    auto m = TransformerLM::init(tiny_config(17));
    CharTokenizer tok;
    EditSample s;
    s.id = "gain";
    s.question = "tell me about bo do .";
    s.target_output = "bo do was born in tasu .";
    s.fine_qas = {{"where was bo do born ?", "tasu", {"tasu"}, true, 0}};
    s.irrelevant = {"where was zu born ?"};
    auto cfg = tiny_edit_config();
    cfg.expansion_multiplier = 2;
    auto expanded_fine = expand_questions(s.fine_qas, cfg.expansion_multiplier);
    auto qa = prepare_qa(tok, expanded_fine[0].question, expanded_fine[0].answer);
    auto hol = prepare_qa(tok, s.question, s.target_output, false);
    const double fine_before = sequence_nll(m, qa.prompt, qa.target);
    const double hol_before = sequence_nll(m, hol.prompt, hol.target);
    EditSample es = s;
    es.fine_qas = expanded_fine;
    run_fable(m, tok, es, cfg, EditMode::kFull);
    CHECK(sequence_nll(m, qa.prompt, qa.target) < fine_before);
    CHECK(sequence_nll(m, hol.prompt, hol.target) < hol_before);
}

TEST_CASE("ablation modes skip the named stage") {
    auto m = TransformerLM::init(tiny_config(8));
    CharTokenizer tok;
    EditSample s;
    s.id = "modes";
    s.question = "tell me about bo do .";
    s.target_output = "bo do was born in tasu .";
    s.fine_qas = {{"where was bo do born ?", "tasu", {"tasu"}, true, 0}};
    s.irrelevant = {"where was zu born ?"};
    auto cfg = tiny_edit_config();
    cfg.expansion_multiplier = 1;
    cfg.layer_steps = 5;
    cfg.delta_steps = 10;
    {
        auto c = m.clone();
        auto r = run_fable(c, tok, s, cfg, EditMode::kNoStage1);
        CHECK(!r.stage_one.ran);
        CHECK(r.stage_two.ran);
        CHECK(r.mode == "no_stage1");
    }
    {
        auto c = m.clone();
        auto r = run_fable(c, tok, s, cfg, EditMode::kNoStage2);
        CHECK(r.stage_one.ran);
        CHECK(!r.stage_two.ran);
    }
    CHECK_THROWS_AS(mode_from_name("stageless"), ConfigError);
}

TEST_CASE("edit configs validate and round-trip through JSON") {
    auto cfg = tiny_edit_config();
    CHECK_NOTHROW(cfg.validate(4));
    auto j = edit_config_to_json(cfg);
    auto back = edit_config_from_json(j);
    CHECK(back.partition.l_fine == cfg.partition.l_fine);
    CHECK(back.edit_layer_set == cfg.edit_layer_set);
    CHECK(back.delta_lr == cfg.delta_lr);
    CHECK(back.spreading == cfg.spreading);

    EditConfig bad = cfg;
    bad.edit_layer_set = {3};  // above L_f
    CHECK_THROWS_AS(bad.validate(4), ConfigError);
    EditConfig bad2 = cfg;
    bad2.partition = {3, 3};
    CHECK_THROWS_AS(bad2.validate(4), ContractError);
    CHECK_THROWS_AS(edit_config_from_json({{"spreading", "psychic"}}), ConfigError);
}

TEST_CASE("the literal frozen-trace spreading variant stays selectable") {
    auto m = TransformerLM::init(tiny_config(12));
    CharTokenizer tok;
    std::vector<PreparedQA> fine = {prepare_qa(tok, "where was bo do born ?", "tasu")};
    std::vector<std::vector<int>> irr = {tok.tokenize(format_prompt("where was zu born ?"))};
    auto cfg = tiny_edit_config();
    cfg.layer_steps = 5;
    cfg.delta_steps = 10;
    cfg.spreading = ResidualSpreading::kFrozenTrace;
    auto m2 = m.clone();
    auto rep = stage_one_edit(m2, fine, irr, cfg);
    CHECK(rep.ran);
    // it optimizes a different target than the recomputed variant
    auto m3 = m.clone();
    cfg.spreading = ResidualSpreading::kRecompute;
    stage_one_edit(m3, fine, irr, cfg);
    CHECK(m2.blocks[1].wq.values() != m3.blocks[1].wq.values());
}
