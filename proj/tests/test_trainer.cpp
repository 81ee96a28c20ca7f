#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cmp/trainer.hpp"

using namespace cmp;

namespace {

Dataset fixture_data(std::size_t classes = 4, std::size_t per_class = 25) {
    return synth_gaussian_stream(classes, 8, per_class, 2.5, 1234);
}

NetworkSpec fixture_spec() {
    NetworkSpec spec;
    spec.mlp_widths = {8, 16};
    spec.projector_widths = {8};
    spec.embed_dim = 8;
    return spec;
}

StrategyConfig base_config(Method m, BaseSsl s) {
    StrategyConfig cfg;
    cfg.method = m;
    cfg.base_ssl = s;
    cfg.hyper.n_patches = 4;
    cfg.hyper.eps_sq = 0.2;
    cfg.b_s = 10;
    cfg.lr = 0.01;
    cfg.seed = 9;
    if (cfg.uses_buffer()) cfg.buffer_capacity = 30;
    return cfg;
}

std::vector<std::string> metric_lines(const RunResult& r) {
    std::vector<std::string> out;
    for (const StepReport& rep : r.reports) out.push_back(rep.json());
    return out;
}

}  // namespace

TEST_CASE("strategy config validation") {
    StrategyConfig cfg = base_config(Method::kFinetune, BaseSsl::kSimsiam);
    CHECK_NOTHROW(cfg.validate());
    cfg.buffer_capacity = 50;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // buffer forbidden

    StrategyConfig er = base_config(Method::kErReservoir, BaseSsl::kSimsiam);
    CHECK_NOTHROW(er.validate());
    er.buffer_capacity = 0;
    CHECK_THROWS_AS(er.validate(), std::invalid_argument);  // buffer required

    StrategyConfig cmp_cfg = base_config(Method::kCmp, BaseSsl::kSimsiam);
    cmp_cfg.hyper.n_patches = 1;
    CHECK_THROWS_AS(cmp_cfg.validate(), std::invalid_argument);

    StrategyConfig zero_b = base_config(Method::kCmp, BaseSsl::kSimsiam);
    zero_b.b_s = 0;
    CHECK_THROWS_AS(zero_b.validate(), std::invalid_argument);

    CHECK(base_config(Method::kCmp, BaseSsl::kByol).uses_target());
    CHECK(!base_config(Method::kCmp, BaseSsl::kSimsiam).uses_target());
    CHECK(!base_config(Method::kEmpSsl, BaseSsl::kByol).uses_target());
}

TEST_CASE("single pass batch arithmetic") {
    Dataset ds = fixture_data(4, 25);  // 100 samples
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 4, 3);

    StrategyConfig cfg = base_config(Method::kFinetune, BaseSsl::kSimsiam);
    RunResult r = run_stream(cfg, spec, view, plan);
    CHECK(r.reports.size() == 10);  // 100 / b_s
    CHECK(r.state.samples_consumed == 100);
    for (const StepReport& rep : r.reports) {
        CHECK(rep.effective_batch == 20);  // two views of 10 stream samples
        CHECK(rep.buffer_size == 0);
    }

    StrategyConfig cmp_cfg = base_config(Method::kCmp, BaseSsl::kSimsiam);
    RunResult rc = run_stream(cmp_cfg, spec, view, plan);
    for (const StepReport& rep : rc.reports)
        CHECK(rep.effective_batch == 4 * 10);  // N patches x b_s
}

TEST_CASE("er replay draws before insertion and grows the batch") {
    Dataset ds = fixture_data(4, 25);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 4, 3);

    StrategyConfig cfg = base_config(Method::kErReservoir, BaseSsl::kSimsiam);
    cfg.buffer_capacity = 30;
    cfg.replay_k = 12;
    RunResult r = run_stream(cfg, spec, view, plan);
    REQUIRE(r.reports.size() == 10);
    for (std::size_t step = 0; step < 10; ++step) {
        // buffer contents at draw time: min(30, 10 * step) items
        std::size_t buf_before = std::min<std::size_t>(30, 10 * step);
        std::size_t expect = 2 * (10 + std::min<std::size_t>(12, buf_before));
        CHECK(r.reports[step].effective_batch == expect);
        CHECK(r.reports[step].buffer_size == std::min<std::size_t>(30, 10 * (step + 1)));
    }

    StrategyConfig fifo_cfg = base_config(Method::kErFifo, BaseSsl::kSimsiam);
    fifo_cfg.buffer_capacity = 15;
    RunResult rf = run_stream(fifo_cfg, spec, view, plan);
    CHECK(rf.reports[0].effective_batch == 20);        // empty buffer at step 0
    CHECK(rf.reports[1].effective_batch == 2 * 20);    // 10 stream + 10 buffered
    CHECK(rf.reports[5].effective_batch == 2 * 25);    // capped at capacity 15
    CHECK(rf.reports[9].buffer_size == 15);
}

TEST_CASE("metrics are byte-identical across reruns") {
    Dataset ds = fixture_data(4, 10);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 2, 3);

    for (Method m : {Method::kFinetune, Method::kCmp, Method::kErReservoir}) {
        StrategyConfig cfg = base_config(m, BaseSsl::kSimsiam);
        auto a = metric_lines(run_stream(cfg, spec, view, plan));
        auto b = metric_lines(run_stream(cfg, spec, view, plan));
        CHECK(a == b);

        StrategyConfig other = cfg;
        other.seed = 10;
        CHECK(metric_lines(run_stream(other, spec, view, plan)) != a);
    }
}

TEST_CASE("composite metrics satisfy loss = ssl + tcr") {
    Dataset ds = fixture_data(4, 10);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 2, 3);

    for (BaseSsl s : {BaseSsl::kSimsiam, BaseSsl::kByol}) {
        StrategyConfig cfg = base_config(Method::kCmp, s);
        RunResult r = run_stream(cfg, spec, view, plan);
        for (const StepReport& rep : r.reports) {
            CHECK(std::isfinite(rep.loss));
            CHECK(rep.loss == Catch::Approx(rep.ssl + rep.tcr).margin(1e-9));
            CHECK(rep.tcr < 0.0);  // coding-rate term enters negated
        }
    }
    StrategyConfig fin = base_config(Method::kFinetune, BaseSsl::kSimsiam);
    RunResult rf = run_stream(fin, spec, view, plan);
    for (const StepReport& rep : rf.reports) {
        CHECK(rep.tcr == 0.0);
        CHECK(rep.loss == rep.ssl);
    }
}

TEST_CASE("lr zero is a fixed point of training") {
    Dataset ds = fixture_data(4, 10);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 2, 3);

    StrategyConfig cfg = base_config(Method::kCmp, BaseSsl::kByol);
    cfg.lr = 0.0;
    TrainerState st = TrainerState::create(cfg, spec);
    ParamSet online0 = st.encoder.online, pred0 = st.encoder.predictor;
    ParamSet target0 = *st.encoder.target;
    for (const MiniBatch& mb : make_minibatches(plan, cfg.b_s))
        train_step(cfg, st, view, mb);
    for (std::size_t i = 0; i < online0.size(); ++i) {
        CHECK(st.encoder.online[i] == online0[i]);
        // target starts equal to online and EMA-chases a constant: no drift
        CHECK((*st.encoder.target)[i] == target0[i]);
    }
    for (std::size_t i = 0; i < pred0.size(); ++i) CHECK(st.encoder.predictor[i] == pred0[i]);
}

TEST_CASE("training moves parameters and ema target lags online") {
    Dataset ds = fixture_data(4, 10);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 2, 3);

    StrategyConfig cfg = base_config(Method::kCmp, BaseSsl::kByol);
    TrainerState st = TrainerState::create(cfg, spec);
    ParamSet online0 = st.encoder.online;
    for (const MiniBatch& mb : make_minibatches(plan, cfg.b_s))
        train_step(cfg, st, view, mb);

    double moved_online = 0.0, online_vs_target = 0.0;
    for (std::size_t i = 0; i < online0.size(); ++i) {
        moved_online += frobenius_norm(st.encoder.online[i] - online0[i]);
        online_vs_target += frobenius_norm(st.encoder.online[i] - (*st.encoder.target)[i]);
    }
    CHECK(moved_online > 1e-6);
    CHECK(online_vs_target > 1e-9);  // target trails the online weights
    double drift_target = 0.0;
    for (std::size_t i = 0; i < online0.size(); ++i)
        drift_target += frobenius_norm((*st.encoder.target)[i] - online0[i]);
    CHECK(drift_target < moved_online);  // and trails by less than theta moved
}

TEST_CASE("divergence raises a stream abort with diagnostics") {
    Dataset ds = fixture_data(2, 10);
    UnlabeledView view(ds);
    NetworkSpec spec = fixture_spec();
    StreamPlan plan = build_stream_plan(ds, 2, 3);

    StrategyConfig cfg = base_config(Method::kCmp, BaseSsl::kSimsiam);
    cfg.lr = 1e150;  // guarantees parameter overflow within a couple of steps
    cfg.weight_decay = 0.0;
    bool aborted = false;
    try {
        run_stream(cfg, spec, view, plan);
    } catch (const StreamAbort& e) {
        aborted = true;
        CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
        CHECK(std::string(e.what()).find("grad_norm") != std::string::npos);
    }
    CHECK(aborted);
}
