// cmp: continual self-supervised learning experiments on streaming data.
//
// Subcommands: train, probe, table, gradcheck, synth-data.
// Exit codes: 0 ok, 1 gradcheck failure, 2 configuration error,
// 3 runtime abort during streaming, 4 corrupt checkpoint.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cmp/checkpoint.hpp"
#include "cmp/config.hpp"
#include "cmp/gradcheck.hpp"
#include "cmp/losses.hpp"
#include "cmp/probe.hpp"
#include "cmp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitAbort = 3;
constexpr int kExitCheckpoint = 4;

void emit_error(const std::string& message, const std::string& key = "") {
    json err = {{"error", message}};
    if (!key.empty()) err["key"] = key;
    std::cerr << err.dump() << "\n";
}

int read_thread_cap() {
    const char* env = std::getenv("CMP_NUM_THREADS");
    if (!env) return 1;
    char* end = nullptr;
    long n = std::strtol(env, &end, 10);
    if (!end || *end != '\0' || n < 1) {
        emit_error("CMP_NUM_THREADS must be a positive integer", "CMP_NUM_THREADS");
        std::exit(kExitConfig);
    }
    return static_cast<int>(n);
}

// ---------------------------------------------------------------------------
// train

struct SplitData {
    cmp::Dataset train;
    cmp::Dataset test;
};

SplitData load_and_split(const cmp::ExperimentConfig& cfg) {
    cmp::Dataset full = cfg.data.load(cfg.seed);
    full.validate();
    auto [train, test] =
        cmp::hold_out_validation(full, cfg.data.holdout_fraction,
                                 cmp::hash64(cfg.seed, "holdout-test"));
    return {std::move(train), std::move(test)};
}

cmp::Checkpoint make_checkpoint(const cmp::ExperimentConfig& cfg,
                                const cmp::TrainerState& st) {
    cmp::Checkpoint ck;
    ck.descriptor = cfg.resolved_text();
    ck.sections.emplace_back("encoder.online", st.encoder.online);
    if (st.encoder.target) ck.sections.emplace_back("encoder.target", *st.encoder.target);
    ck.sections.emplace_back("predictor", st.encoder.predictor);
    if (st.reservoir) {
        for (std::size_t id : st.reservoir->slots()) ck.buffer_items.push_back(id);
        ck.buffer_meta = st.reservoir->seen();
    } else if (st.fifo) {
        for (std::size_t id : st.fifo->contents()) ck.buffer_items.push_back(id);
        ck.buffer_meta = st.fifo->pushed();
    }
    return ck;
}

int run_training(cmp::ExperimentConfig cfg, const fs::path& run_dir) {
    fs::create_directories(run_dir);
    {
        std::ofstream out(run_dir / "config.resolved");
        out << cfg.resolved_text();
    }
    SplitData data = load_and_split(cfg);
    cmp::UnlabeledView view(data.train);
    cmp::StreamPlan plan =
        cmp::build_stream_plan(data.train, cfg.splits, cmp::hash64(cfg.seed, "stream"));

    cmp::RunResult result;
    try {
        result = cmp::run_stream(cfg.strategy, cfg.model, view, plan);
    } catch (const cmp::StreamAbort& e) {
        emit_error(e.what());
        return kExitAbort;
    }

    std::ofstream steps(run_dir / "steps.jsonl");
    for (const cmp::StepReport& rep : result.reports) steps << rep.json() << "\n";
    steps.close();

    make_checkpoint(cfg, result.state).save((run_dir / "checkpoint.cmpc").string());
    std::cout << "run complete: " << result.reports.size() << " steps, "
              << result.state.samples_consumed << " samples -> " << run_dir.string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_flag,
              const std::string& out_flag, std::size_t n_seeds) {
    cmp::ExperimentConfig cfg;
    try {
        cfg = cmp::ExperimentConfig::from_file(config_path);
        if (seed_flag) cfg.set_seed(*seed_flag);
        if (!out_flag.empty()) cfg.out_dir = out_flag;
        if (cfg.out_dir.empty())
            throw cmp::ConfigError("run.out", "output directory required (or pass --out)");
    } catch (const cmp::ConfigError& e) {
        emit_error(e.what(), e.key);
        return kExitConfig;
    }

    if (n_seeds <= 1) return run_training(cfg, cfg.out_dir);
    fs::path base = cfg.out_dir;
    std::uint64_t seed0 = cfg.seed;
    for (std::size_t i = 0; i < n_seeds; ++i) {
        cmp::ExperimentConfig run_cfg = cfg;
        run_cfg.set_seed(seed0 + i);
        run_cfg.out_dir = (base / ("seed-" + std::to_string(seed0 + i))).string();
        int rc = run_training(run_cfg, run_cfg.out_dir);
        if (rc != 0) return rc;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// probe

int cmd_probe(const std::string& checkpoint_path, const std::string& out_flag) {
    cmp::Checkpoint ck;
    try {
        ck = cmp::Checkpoint::load(checkpoint_path);
    } catch (const cmp::CheckpointError& e) {
        emit_error(e.what());
        return kExitCheckpoint;
    }

    cmp::ExperimentConfig cfg;
    try {
        cfg = cmp::ExperimentConfig::from_text(ck.descriptor);
    } catch (const cmp::ConfigError& e) {
        emit_error("checkpoint descriptor invalid: " + std::string(e.what()), e.key);
        return kExitConfig;
    }

    const std::vector<cmp::Matrix>* online = ck.find("encoder.online");
    if (!online) {
        emit_error("checkpoint has no encoder.online section");
        return kExitCheckpoint;
    }
    cmp::EncoderState enc =
        cmp::EncoderState::create(cfg.model, cfg.seed, cfg.strategy.uses_target());
    if (online->size() != enc.online.size()) {
        emit_error("checkpoint parameter count does not match its model spec");
        return kExitCheckpoint;
    }
    enc.online = *online;

    SplitData data = load_and_split(cfg);
    cmp::Matrix train_f = cmp::extract_features(enc, data.train);
    cmp::Matrix test_f = cmp::extract_features(enc, data.test);
    cmp::ProbeResult res =
        cmp::train_probe(train_f, data.train.labels, test_f, data.test.labels,
                         data.train.class_count, cfg.probe);
    cmp::DiagnosticsReport diag = cmp::representation_diagnostics(test_f);

    json out = {{"config_hash", cfg.config_hash()},
                {"seed", cfg.seed},
                {"test_accuracy", res.test_accuracy},
                {"best_val_accuracy", res.best_val_accuracy},
                {"per_class_accuracy", res.per_class_accuracy},
                {"epochs_run", res.epochs_run},
                {"lr_trajectory", res.lr_trajectory},
                {"effective_rank", diag.effective_rank},
                {"mean_pairwise_cosine", diag.mean_pairwise_cosine}};

    fs::path out_path = out_flag.empty()
                            ? fs::path(checkpoint_path).parent_path() / "probe.json"
                            : fs::path(out_flag);
    std::ofstream f(out_path);
    f << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// table

struct TableRow {
    std::string base_ssl, strategy;
    std::size_t buffer = 0;
    std::vector<double> accuracies;
};

int cmd_table(const std::vector<std::string>& run_dirs, const std::string& csv_out) {
    std::map<std::string, TableRow> rows;  // keyed by config hash
    for (const std::string& dir : run_dirs) {
        cmp::ExperimentConfig cfg;
        try {
            cfg = cmp::ExperimentConfig::from_file((fs::path(dir) / "config.resolved").string());
        } catch (const cmp::ConfigError& e) {
            emit_error("run " + dir + ": " + e.what(), e.key);
            return kExitConfig;
        }
        std::ifstream pf(fs::path(dir) / "probe.json");
        if (!pf) {
            emit_error("run " + dir + " has no probe.json (run `cmp probe` first)");
            return kExitConfig;
        }
        json probe = json::parse(pf, nullptr, false);
        if (probe.is_discarded() || !probe.contains("test_accuracy")) {
            emit_error("run " + dir + ": probe.json is not valid");
            return kExitConfig;
        }
        TableRow& row = rows[cfg.config_hash()];
        row.base_ssl = to_string(cfg.strategy.base_ssl);
        row.strategy = to_string(cfg.strategy.method);
        row.buffer = cfg.strategy.buffer_capacity;
        row.accuracies.push_back(probe["test_accuracy"].get<double>());
    }

    std::ostringstream text, csv;
    csv << "config_hash,base_ssl,strategy,buffer,seeds,mean_accuracy,std_accuracy\n";
    text << "SSL Method  Strategy       M size  Probing Accuracy\n";
    text << "----------  -------------  ------  ----------------\n";
    text.precision(1);
    text << std::fixed;
    for (const auto& [hash, row] : rows) {
        double mean = 0.0;
        for (double a : row.accuracies) mean += a;
        mean /= double(row.accuracies.size());
        double var = 0.0;
        for (double a : row.accuracies) var += (a - mean) * (a - mean);
        std::string std_str;
        if (row.accuracies.size() > 1) {
            double sd = std::sqrt(var / double(row.accuracies.size() - 1));
            std::ostringstream s;
            s.precision(1);
            s << std::fixed << sd * 100.0;
            std_str = s.str();
        }
        text.width(10);
        text << std::left << row.base_ssl << "  ";
        text.width(13);
        text << std::left << row.strategy << "  ";
        text.width(6);
        text << std::left << (row.buffer ? std::to_string(row.buffer) : "-") << "  ";
        text << mean * 100.0;
        if (!std_str.empty()) text << " +- " << std_str;
        text << "\n";
        csv << hash << "," << row.base_ssl << "," << row.strategy << "," << row.buffer << ","
            << row.accuracies.size() << ",";
        csv.precision(17);
        csv << mean << "," << (std_str.empty() ? "" : std::to_string(std::sqrt(
                                   var / double(row.accuracies.size() - 1))))
            << "\n";
    }
    std::cout << text.str();
    if (!csv_out.empty()) {
        std::ofstream f(csv_out);
        f << csv.str();
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct SuiteResult {
    std::string name;
    double max_err = 0.0;
};

cmp::Matrix random_embed(std::size_t b, std::size_t d, std::uint64_t seed) {
    cmp::Rng rng(seed);
    cmp::Matrix m(b, d);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

int cmd_gradcheck() {
    using cmp::ad::Graph;
    using cmp::ad::Node;
    std::vector<SuiteResult> results;
    const std::size_t instances = 20;

    cmp::CmpHyperParams hp;
    hp.alpha = 1.0;
    hp.beta = 0.7;
    hp.eps_sq = 0.2;
    hp.n_patches = 3;

    for (std::size_t i = 0; i < instances; ++i) {
        std::uint64_t s = 5000 + i;
        std::size_t b = 2 + i % 4, d = 3 + i % 5;
        cmp::Matrix x0 = random_embed(b, d, s);
        cmp::Matrix other1 = random_embed(b, d, s + 9000);
        cmp::Matrix other2 = random_embed(b, d, s + 9001);

        auto record = [&](const char* name, const cmp::ad::ScalarFn& fn) {
            double err = cmp::ad::grad_check(fn, x0).max_rel_err;
            for (auto& r : results)
                if (r.name == name) {
                    r.max_err = std::max(r.max_err, err);
                    return;
                }
            results.push_back({name, err});
        };

        record("tcr_loss", [&](Graph& g, Node* x) {
            cmp::PatchEmbeddings pe;
            pe.online = {x, g.constant(other1), g.constant(other2)};
            return cmp::losses::tcr_loss(g, pe.online, hp);
        });
        record("simsiam_loss", [&](Graph& g, Node* x) {
            // gradient flows through the predictor argument only
            return cmp::losses::simsiam_loss(g, g.constant(other1), g.constant(other2), x,
                                             g.constant(x0));
        });
        record("byol_loss", [&](Graph& g, Node* x) {
            return cmp::losses::byol_loss(g, g.constant(other1), g.constant(other2), x,
                                          g.constant(x0), false);
        });
        record("simsiam_cmp_loss", [&](Graph& g, Node* x) {
            // vary one predictor output; the sg(z_avg) branch stays constant
            cmp::PatchEmbeddings pe;
            pe.online = {g.constant(x0), g.constant(other1), g.constant(other2)};
            pe.predictor = {x, g.constant(other2), g.constant(other1)};
            return cmp::losses::simsiam_cmp_loss(g, pe, hp).total;
        });
        record("byol_cmp_loss", [&](Graph& g, Node* x) {
            // vary one online patch: it reaches the loss through TCR only
            cmp::PatchEmbeddings pe;
            pe.online = {x, g.constant(other1), g.constant(other2)};
            pe.predictor = {g.constant(x0), g.constant(other2), g.constant(other1)};
            pe.target = {g.constant(other2), g.constant(x0), g.constant(other1)};
            return cmp::losses::byol_cmp_loss(g, pe, hp).total;
        });
        record("empssl_loss", [&](Graph& g, Node* x) {
            cmp::PatchEmbeddings pe;
            pe.online = {x, g.constant(other1), g.constant(other2)};
            return cmp::losses::empssl_loss(g, pe, hp).total;
        });
    }

    bool ok = true;
    for (const SuiteResult& r : results) {
        bool pass = r.max_err < 1e-5;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << r.max_err
                  << "\n";
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// synth-data

int cmd_synth_data(std::size_t classes, std::size_t dim, std::size_t per_class,
                   double class_sep, std::uint64_t seed, const std::string& out_path) {
    try {
        cmp::Dataset ds = cmp::synth_gaussian_stream(classes, dim, per_class, class_sep, seed);
        cmp::save_dataset(ds, out_path);
    } catch (const std::exception& e) {
        emit_error(e.what());
        return kExitConfig;
    }
    std::cout << "wrote " << classes * per_class << " samples to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    read_thread_cap();  // validated; kernels are single-threaded

    CLI::App app{"continual multi-patch self-supervised learning experiments"};
    app.require_subcommand(1);

    std::string config_path, out_path, checkpoint_path, csv_out;
    std::optional<std::uint64_t> seed_flag;
    std::size_t n_seeds = 1;
    std::vector<std::string> run_dirs;
    std::size_t sd_classes = 0, sd_dim = 0, sd_per_class = 0;
    double sd_sep = 0.0;
    std::uint64_t sd_seed = 0;

    CLI::App* train = app.add_subcommand("train", "stream one training run");
    train->add_option("--config", config_path, "experiment config file")->required();
    train->add_option("--seed", seed_flag, "master seed override");
    train->add_option("--out", out_path, "run directory override");
    train->add_option("--seeds", n_seeds, "sweep this many consecutive seeds");

    CLI::App* probe = app.add_subcommand("probe", "linear-probe a checkpoint");
    probe->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    probe->add_option("--out", out_path, "probe result path (default: run dir probe.json)");

    CLI::App* table = app.add_subcommand("table", "aggregate runs into the results table");
    table->add_option("dirs", run_dirs, "run directories")->required();
    table->add_option("--out", csv_out, "also write CSV here");

    app.add_subcommand("gradcheck", "finite-difference checks for every loss");

    CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic gaussian dataset");
    synth->add_option("--classes", sd_classes)->required();
    synth->add_option("--dim", sd_dim)->required();
    synth->add_option("--samples-per-class", sd_per_class)->required();
    synth->add_option("--class-sep", sd_sep)->required();
    synth->add_option("--seed", sd_seed);
    synth->add_option("--out", out_path, "output dataset path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        emit_error(e.what());
        return kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed_flag, out_path, n_seeds);
        if (probe->parsed()) return cmd_probe(checkpoint_path, out_path);
        if (table->parsed()) return cmd_table(run_dirs, csv_out);
        if (synth->parsed())
            return cmd_synth_data(sd_classes, sd_dim, sd_per_class, sd_sep, sd_seed, out_path);
        return cmd_gradcheck();
    } catch (const cmp::ConfigError& e) {
        emit_error(e.what(), e.key);
        return kExitConfig;
    } catch (const cmp::CheckpointError& e) {
        emit_error(e.what());
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        emit_error(e.what());
        return kExitAbort;
    }
}
