#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmp/datastream.hpp"
#include "cmp/losses.hpp"
#include "cmp/models.hpp"
#include "cmp/replay.hpp"

namespace cmp {

enum class Method { kFinetune, kErReservoir, kErFifo, kCmp, kEmpSsl };
enum class BaseSsl { kSimsiam, kByol };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::kFinetune: return "finetune";
        case Method::kErReservoir: return "er-reservoir";
        case Method::kErFifo: return "er-fifo";
        case Method::kCmp: return "cmp";
        default: return "emp-ssl";
    }
}
inline std::string to_string(BaseSsl s) {
    return s == BaseSsl::kSimsiam ? "simsiam" : "byol";
}

struct StrategyConfig {
    Method method = Method::kCmp;
    BaseSsl base_ssl = BaseSsl::kSimsiam;  // ignored for emp-ssl
    CmpHyperParams hyper;
    AugmentConfig augment;
    std::size_t buffer_capacity = 0;
    std::size_t replay_k = 90;
    std::size_t b_s = 10;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double ema_tau = 0.99;
    std::uint64_t seed = 0;

    bool uses_buffer() const {
        return method == Method::kErReservoir || method == Method::kErFifo;
    }
    bool uses_target() const {
        return base_ssl == BaseSsl::kByol && method != Method::kEmpSsl;
    }
    bool uses_multipatch() const {
        return method == Method::kCmp || method == Method::kEmpSsl;
    }

    void validate() const {
        if (uses_buffer()) {
            if (buffer_capacity == 0)
                throw std::invalid_argument("StrategyConfig: ER methods require a buffer capacity");
        } else if (buffer_capacity != 0) {
            throw std::invalid_argument("StrategyConfig: buffer settings forbidden for " +
                                        to_string(method));
        }
        if (uses_multipatch()) hyper.validate();
        if (b_s == 0) throw std::invalid_argument("StrategyConfig: b_s must be >= 1");
    }
};

struct StepReport {
    std::size_t step = 0;
    double loss = 0.0;
    double ssl = 0.0;
    double tcr = 0.0;
    std::size_t buffer_size = 0;
    double ms = 0.0;               // wall clock, in-memory diagnostics only
    std::size_t effective_batch = 0;  // embeddings (CMP/EMP) or views (two-view)

    /// Deterministic metrics line; wall-clock stays out of the file so
    /// identical runs serialize byte-identically.
    std::string json() const {
        std::ostringstream out;
        out.precision(17);
        out << "{\"step\":" << step << ",\"loss\":" << loss << ",\"ssl\":" << ssl
            << ",\"tcr\":" << tcr << ",\"buffer\":" << buffer_size << "}";
        return out.str();
    }
};

struct StreamAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Full mutable training state for one run.
struct TrainerState {
    EncoderState encoder;
    OptimizerState optimizer;
    std::optional<ReservoirBuffer> reservoir;
    std::optional<FifoBuffer> fifo;
    std::size_t samples_consumed = 0;

    static TrainerState create(const StrategyConfig& cfg, const NetworkSpec& spec) {
        cfg.validate();
        TrainerState st{
            EncoderState::create(spec, cfg.seed, cfg.uses_target(), cfg.ema_tau),
            OptimizerState{cfg.lr, cfg.momentum, cfg.weight_decay, {}},
            {},
            {},
            0};
        if (cfg.method == Method::kErReservoir)
            st.reservoir.emplace(cfg.buffer_capacity, cfg.seed);
        if (cfg.method == Method::kErFifo) st.fifo.emplace(cfg.buffer_capacity);
        return st;
    }

    std::size_t buffer_size() const {
        if (reservoir) return reservoir->size();
        if (fifo) return fifo->size();
        return 0;
    }
};

namespace detail {

inline Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
    return m;
}

/// Patch-index-major batches: result[i] is the b x dim matrix of patch i
/// across all samples.
inline std::vector<Matrix> patch_batches(const UnlabeledView& view,
                                         const std::vector<std::size_t>& ids,
                                         const AugmentConfig& aug, std::uint64_t seed,
                                         std::size_t n_patches) {
    std::vector<std::vector<std::vector<double>>> per_sample;
    per_sample.reserve(ids.size());
    for (std::size_t id : ids) per_sample.push_back(multipatch(view, id, aug, seed, n_patches));
    std::vector<Matrix> out;
    out.reserve(n_patches);
    for (std::size_t p = 0; p < n_patches; ++p) {
        Matrix m(ids.size(), view.input_dim());
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t c = 0; c < view.input_dim(); ++c) m(r, c) = per_sample[r][p][c];
        out.push_back(std::move(m));
    }
    return out;
}

inline double grad_norm(const std::vector<Matrix>& grads) {
    double s = 0.0;
    for (const Matrix& g : grads)
        for (double v : g.data()) s += v * v;
    return std::sqrt(s);
}

}  // namespace detail

/// One gradient step on one streaming minibatch. Replay is drawn before
/// the current batch is inserted, and buffer insertion happens after the
/// gradient step.
inline StepReport train_step(const StrategyConfig& cfg, TrainerState& st,
                             const UnlabeledView& view, const MiniBatch& batch) {
    auto t0 = std::chrono::steady_clock::now();
    StepReport rep;
    rep.step = batch.step;

    // batch assembly
    std::vector<std::size_t> ids = batch.sample_ids;
    if (cfg.method == Method::kErReservoir) {
        Rng draw(hash64(cfg.seed, "replay-draw", batch.step));
        ids = assemble_er_batch(ids, st.reservoir->sample(cfg.replay_k, draw));
    } else if (cfg.method == Method::kErFifo) {
        ids = assemble_er_batch(ids, st.fifo->contents());
    }

    ad::Graph g;
    std::vector<ad::Node*> enc_params, pred_params;
    auto enc_param_nodes = [&]() {
        if (enc_params.empty())
            for (const Matrix& p : st.encoder.online) enc_params.push_back(g.input(p));
        return enc_params;
    };
    auto pred_param_nodes = [&]() {
        if (pred_params.empty())
            for (const Matrix& p : st.encoder.predictor) pred_params.push_back(g.input(p));
        return pred_params;
    };
    auto target_param_nodes = [&]() {
        std::vector<ad::Node*> out;
        for (const Matrix& p : *st.encoder.target) out.push_back(g.constant(p));
        return out;
    };

    ad::Node* loss = nullptr;
    if (cfg.uses_multipatch()) {
        std::vector<Matrix> patches = detail::patch_batches(
            view, ids, cfg.augment, hash64(cfg.seed, "step", batch.step), cfg.hyper.n_patches);
        PatchEmbeddings pe;
        std::vector<ad::Node*> tparams;
        if (cfg.uses_target()) tparams = target_param_nodes();
        for (const Matrix& x : patches) {
            ad::Node* xin = g.constant(x);
            ad::Node* z = st.encoder.encoder_net.forward(g, enc_param_nodes(), xin);
            pe.online.push_back(z);
            if (cfg.method == Method::kCmp) {
                pe.predictor.push_back(
                    st.encoder.predictor_net.forward(g, pred_param_nodes(), z));
                if (cfg.uses_target())
                    pe.target.push_back(st.encoder.encoder_net.forward(g, tparams, xin));
            }
        }
        rep.effective_batch = pe.online.size() * ids.size();
        losses::CompositeLoss composite =
            cfg.method == Method::kEmpSsl ? losses::empssl_loss(g, pe, cfg.hyper)
            : cfg.base_ssl == BaseSsl::kByol ? losses::byol_cmp_loss(g, pe, cfg.hyper)
                                             : losses::simsiam_cmp_loss(g, pe, cfg.hyper);
        loss = composite.total;
        rep.ssl = composite.ssl_term->scalar();
        rep.tcr = composite.tcr_term->scalar();
    } else {
        std::vector<std::vector<double>> v1, v2;
        std::uint64_t step_seed = hash64(cfg.seed, "step", batch.step);
        for (std::size_t id : ids) {
            auto views = two_view(view, id, cfg.augment, step_seed);
            v1.push_back(std::move(views[0]));
            v2.push_back(std::move(views[1]));
        }
        rep.effective_batch = 2 * ids.size();
        ad::Node* x1 = g.constant(detail::rows_to_matrix(v1));
        ad::Node* x2 = g.constant(detail::rows_to_matrix(v2));
        ad::Node* z1 = st.encoder.encoder_net.forward(g, enc_param_nodes(), x1);
        ad::Node* z2 = st.encoder.encoder_net.forward(g, enc_param_nodes(), x2);
        ad::Node* p1 = st.encoder.predictor_net.forward(g, pred_param_nodes(), z1);
        ad::Node* p2 = st.encoder.predictor_net.forward(g, pred_param_nodes(), z2);
        if (cfg.base_ssl == BaseSsl::kByol) {
            auto tparams = target_param_nodes();
            ad::Node* z1t = st.encoder.encoder_net.forward(g, tparams, x1);
            ad::Node* z2t = st.encoder.encoder_net.forward(g, tparams, x2);
            loss = losses::byol_loss(g, z1t, z2t, p1, p2, cfg.hyper.mse_sum_form);
        } else {
            loss = losses::simsiam_loss(g, z1, z2, p1, p2);
        }
        rep.ssl = loss->scalar();
        rep.tcr = 0.0;
    }

    rep.loss = loss->scalar();
    g.backward(loss);

    std::vector<Matrix> grads;
    ParamSet trainable = st.encoder.online;
    for (ad::Node* n : enc_params) grads.push_back(n->grad);
    if (!pred_params.empty()) {
        for (const Matrix& p : st.encoder.predictor) trainable.push_back(p);
        for (ad::Node* n : pred_params) grads.push_back(n->grad);
    }

    if (!std::isfinite(rep.loss)) {
        std::ostringstream diag;
        diag << "non-finite loss at step " << batch.step << ": loss=" << rep.loss
             << " ssl=" << rep.ssl << " tcr=" << rep.tcr
             << " grad_norm=" << detail::grad_norm(grads);
        throw StreamAbort(diag.str());
    }

    st.optimizer.step(trainable, grads);
    std::size_t n_enc = st.encoder.online.size();
    for (std::size_t i = 0; i < n_enc; ++i) st.encoder.online[i] = trainable[i];
    for (std::size_t i = n_enc; i < trainable.size(); ++i)
        st.encoder.predictor[i - n_enc] = trainable[i];

    if (st.encoder.target) ema_update(st.encoder);

    // buffer update: current stream samples enter only after the step
    if (st.reservoir)
        for (std::size_t id : batch.sample_ids) st.reservoir->insert(id);
    if (st.fifo)
        for (std::size_t id : batch.sample_ids) st.fifo->push(id);

    st.samples_consumed += batch.sample_ids.size();
    rep.buffer_size = st.buffer_size();
    rep.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                 .count();
    return rep;
}

struct RunResult {
    TrainerState state;
    std::vector<StepReport> reports;
};

/// Single pass over the stream; exactly one gradient step per minibatch.
inline RunResult run_stream(const StrategyConfig& cfg, const NetworkSpec& spec,
                            const UnlabeledView& view, const StreamPlan& plan) {
    RunResult result{TrainerState::create(cfg, spec), {}};
    std::vector<MiniBatch> batches = make_minibatches(plan, cfg.b_s);
    result.reports.reserve(batches.size());
    for (const MiniBatch& mb : batches)
        result.reports.push_back(train_step(cfg, result.state, view, mb));
    return result;
}

}  // namespace cmp
