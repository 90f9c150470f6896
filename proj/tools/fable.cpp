// Command-line front end: pretrain a toy model on a synthetic corpus, run
// hierarchical edits, evaluate, ablate, and dump stage-two probability
// trajectories.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fable/harness.hpp"

namespace {

fable::EditConfig load_edit_config(const std::string& path, uint64_t seed) {
    fable::EditConfig cfg;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw fable::ConfigError("cannot open config file '" + path + "'");
        nlohmann::json j;
        f >> j;
        cfg = fable::edit_config_from_json(j);
    }
    cfg.seed = seed;
    return cfg;
}

std::vector<fable::EditMode> parse_modes(const std::string& mode) {
    if (mode == "all")
        return {fable::EditMode::kFull, fable::EditMode::kNoStage1, fable::EditMode::kNoStage2};
    return {fable::mode_from_name(mode)};
}

void emit_rows(const std::vector<fable::ResultRow>& rows, const std::string& out,
               const std::string& format) {
    std::string text = format == "json" ? fable::rows_to_json(rows).dump(2) + "\n"
                                        : fable::rows_to_csv(rows);
    if (out.empty())
        std::cout << text;
    else
        fable::write_text_file(out, text);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale hierarchical model editing"};
    app.require_subcommand(1);

    std::string dataset, model, out, mode = "full", config, format = "csv", corpus;
    uint64_t seed = 1;
    int gen = 0, steps = 3000, n_limit = 0;

    auto add_common = [&](CLI::App* c, bool needs_model) {
        c->add_option("--dataset", dataset, "edit-sample JSON file")->required();
        if (needs_model) c->add_option("--model", model, "base checkpoint JSON")->required();
        c->add_option("--out", out, "output path");
        c->add_option("--seed", seed, "random seed");
        c->add_option("--config", config, "edit-config JSON file");
        c->add_option("-n,--limit", n_limit, "use only the first N samples");
    };

    auto* pre = app.add_subcommand("pretrain", "train the base model");
    pre->add_option("--gen", gen, "generate a synthetic world with N edit samples");
    pre->add_option("--corpus", corpus, "pretrain on an existing line-per-example text file");
    pre->add_option("--dataset", dataset, "where to write the generated edit samples");
    pre->add_option("--out", out, "checkpoint output path")->required();
    pre->add_option("--seed", seed, "random seed");
    pre->add_option("--steps", steps, "optimizer steps");

    auto* edit = app.add_subcommand("edit", "apply edits, one isolated run per sample");
    add_common(edit, true);
    edit->add_option("--mode", mode, "full | no_stage1 | no_stage2");

    auto* eval = app.add_subcommand("eval", "edit and score each sample");
    add_common(eval, true);
    eval->add_option("--mode", mode, "full | no_stage1 | no_stage2 | all");
    eval->add_option("--format", format, "csv | json")
        ->check(CLI::IsMember({"csv", "json"}));

    auto* abl = app.add_subcommand("ablate", "compare full against both single-stage ablations");
    add_common(abl, true);
    abl->add_option("--format", format, "csv | json")->check(CLI::IsMember({"csv", "json"}));

    auto* traj = app.add_subcommand("trajectory",
                                    "stage-two probability curves, full vs no_stage1");
    add_common(traj, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) {
            std::vector<std::string> lines;
            if (gen > 0) {
                auto world = fable::generate_synthetic_corpus(gen, seed);
                lines = world.corpus_lines;
                if (!dataset.empty()) fable::save_dataset(world.samples, dataset);
                std::cerr << "generated " << world.samples.size() << " edit samples, "
                          << lines.size() << " pretraining lines\n";
            } else if (!corpus.empty()) {
                std::ifstream f(corpus);
                if (!f) throw fable::ConfigError("cannot open corpus file '" + corpus + "'");
                std::string line;
                while (std::getline(f, line))
                    if (!line.empty()) lines.push_back(line);
            } else {
                std::cerr << "pretrain: pass --gen N or --corpus FILE\n";
                return 2;
            }
            fable::LMConfig cfg;
            cfg.seed = seed;
            auto result = fable::train_toy_lm(lines, cfg, steps);
            fable::save_checkpoint(result.model, out);
            std::cerr << "final loss " << result.loss_history.back() << ", checkpoint at " << out
                      << "\n";
            return 0;
        }

        fable::CharTokenizer tok;
        auto samples = fable::load_dataset(dataset);
        if (n_limit > 0 && static_cast<int>(samples.size()) > n_limit)
            samples.resize(static_cast<size_t>(n_limit));
        auto base = fable::load_checkpoint(model);
        fable::EditConfig cfg = load_edit_config(config, seed);

        if (edit->parsed()) {
            nlohmann::json reports = nlohmann::json::array();
            int failures = 0;
            for (const auto& s : samples) {
                auto run = fable::run_sample(base, tok, s, cfg, fable::mode_from_name(mode));
                if (run.failed) {
                    ++failures;
                    std::cerr << "FAIL sample " << run.sample_id << ": " << run.error << "\n";
                    reports.push_back({{"sample_id", run.sample_id}, {"error", run.error}});
                    continue;
                }
                nlohmann::json j = fable::report_to_json(run.report, cfg);
                j["sample_id"] = run.sample_id;
                j["wall_seconds"] = run.wall_seconds;
                j["locality_match"] = run.locality_match;
                j["holistic_exact"] = run.holistic_exact;
                reports.push_back(std::move(j));
                std::cerr << "edited " << run.sample_id << " in " << run.wall_seconds << "s\n";
            }
            if (!out.empty()) fable::write_text_file(out, reports.dump(2) + "\n");
            else std::cout << reports.dump(2) << "\n";
            if (failures > 0)
                std::cerr << failures << " of " << samples.size() << " samples failed\n";
            return failures == 0 ? 0 : 1;
        }

        if (eval->parsed() || abl->parsed()) {
            auto modes = abl->parsed() ? parse_modes("all") : parse_modes(mode);
            auto batch = fable::run_batch(base, tok, samples, cfg, modes, "bag-cosine", &std::cerr);
            emit_rows(batch.rows, out, format);
            return batch.failures == 0 ? 0 : 1;
        }

        if (traj->parsed()) {
            std::vector<std::pair<std::string, fable::TrajectoryComparison>> items;
            int failures = 0;
            for (const auto& s : samples) {
                try {
                    auto expanded = fable::expand_sample(s, cfg.expansion_multiplier);
                    items.emplace_back(s.id, fable::trajectory_compare(base, tok, expanded, cfg));
                    std::cerr << "trajectory " << s.id << " done\n";
                } catch (const std::exception& e) {
                    ++failures;
                    std::cerr << "FAIL sample " << s.id << ": " << e.what() << "\n";
                }
            }
            const std::string csv = fable::trajectories_to_csv(items, seed, cfg);
            if (!out.empty()) fable::write_text_file(out, csv);
            else std::cout << csv;
            if (failures > 0)
                std::cerr << failures << " of " << samples.size() << " samples failed\n";
            return failures == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
