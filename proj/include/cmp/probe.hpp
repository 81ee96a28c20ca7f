#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cmp/datastream.hpp"
#include "cmp/linalg.hpp"
#include "cmp/matrix.hpp"
#include "cmp/models.hpp"
#include "cmp/rng.hpp"

namespace cmp {

struct ProbeConfig {
    double lr0 = 0.05;
    double lr_decay = 1.0 / 3.0;  // "reduced by one third": multiply by 1/3
    std::size_t patience = 3;     // epochs without val improvement before decay
    std::size_t max_epochs = 100;
    double lr_floor = 1e-4;
    std::size_t batch_size = 32;
    double val_fraction = 0.10;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr_floor > 0.0 && lr_floor < lr0))
            throw std::invalid_argument("ProbeConfig: need 0 < lr_floor < lr0");
        if (!(lr_decay > 0.0 && lr_decay < 1.0))
            throw std::invalid_argument("ProbeConfig: lr_decay must be in (0,1)");
    }
};

struct ProbeResult {
    double test_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::size_t epochs_run = 0;
    std::vector<double> lr_trajectory;  // lr in effect at each epoch
    double best_val_accuracy = 0.0;
};

/// Frozen-encoder embeddings for every sample; the encoder is read-only
/// here. backbone_only skips the projector.
inline Matrix extract_features(const EncoderState& state, const Dataset& ds,
                               bool backbone_only = false) {
    const Network* net = &state.encoder_net;
    Network backbone_net;  // built on demand
    ParamSet params = state.online;
    if (backbone_only) {
        NetworkSpec trimmed = state.spec;
        trimmed.projector_widths.clear();
        trimmed.embed_dim = 1;  // unused without a projector
        backbone_net = Network::encoder(trimmed);  // backbone layers only
        params.resize(backbone_net.param_count());
        net = &backbone_net;
    }
    Matrix inputs(ds.size(), ds.input_dim());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::vector<double> row = ds.sample(i);
        for (std::size_t c = 0; c < row.size(); ++c) inputs(i, c) = row[c];
    }
    return net->forward_value(params, inputs);
}

namespace detail {

struct LinearProbe {
    Matrix w;  // d x C
    Matrix b;  // 1 x C

    Matrix logits(const Matrix& f, const std::vector<std::size_t>& ids) const {
        Matrix out(ids.size(), w.cols());
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t c = 0; c < w.cols(); ++c) {
                double s = b(0, c);
                for (std::size_t k = 0; k < w.rows(); ++k) s += f(ids[r], k) * w(k, c);
                out(r, c) = s;
            }
        return out;
    }

    double accuracy(const Matrix& f, const std::vector<std::uint32_t>& labels,
                    std::vector<double>* per_class = nullptr,
                    std::size_t class_count = 0) const {
        std::vector<std::size_t> ids(f.rows());
        std::iota(ids.begin(), ids.end(), 0);
        Matrix lg = logits(f, ids);
        std::vector<std::size_t> correct(class_count), total(class_count);
        std::size_t hits = 0;
        for (std::size_t r = 0; r < lg.rows(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < lg.cols(); ++c)
                if (lg(r, c) > lg(r, best)) best = c;
            bool ok = best == labels[r];
            hits += ok;
            if (per_class) {
                ++total[labels[r]];
                correct[labels[r]] += ok;
            }
        }
        if (per_class) {
            per_class->assign(class_count, 0.0);
            for (std::size_t k = 0; k < class_count; ++k)
                if (total[k]) (*per_class)[k] = double(correct[k]) / double(total[k]);
        }
        return double(hits) / double(lg.rows());
    }
};

}  // namespace detail

/// Softmax-regression probe on frozen features: SGD with the plateau lr
/// schedule (decay on `patience` stale epochs, halt at max_epochs or when
/// lr drops under lr_floor); reports test accuracy at the best-validation
/// epoch.
inline ProbeResult train_probe(const Matrix& train_features,
                               const std::vector<std::uint32_t>& train_labels,
                               const Matrix& test_features,
                               const std::vector<std::uint32_t>& test_labels,
                               std::size_t class_count, const ProbeConfig& cfg) {
    cfg.validate();
    if (train_features.rows() != train_labels.size())
        throw std::invalid_argument("train_probe: feature/label count mismatch");
    {
        std::vector<bool> present(class_count, false);
        std::size_t distinct = 0;
        for (std::uint32_t l : train_labels)
            if (!present[l]) {
                present[l] = true;
                ++distinct;
            }
        if (distinct < 2)
            throw std::invalid_argument("train_probe: need at least 2 classes present");
    }
    const std::size_t d = train_features.cols(), c_count = class_count;

    // stratified train/val split of the probe training data
    std::vector<std::vector<std::size_t>> by_class(class_count);
    for (std::size_t i = 0; i < train_labels.size(); ++i)
        by_class[train_labels[i]].push_back(i);
    std::vector<std::size_t> fit_ids, val_ids;
    for (std::size_t k = 0; k < class_count; ++k) {
        Rng rng(hash64(cfg.seed, "probe-val", k));
        rng.shuffle(by_class[k]);
        std::size_t take = static_cast<std::size_t>(
            std::floor(cfg.val_fraction * double(by_class[k].size()) + 0.5));
        for (std::size_t i = 0; i < by_class[k].size(); ++i)
            (i < take ? val_ids : fit_ids).push_back(by_class[k][i]);
    }
    auto slice = [&](const std::vector<std::size_t>& ids) {
        Matrix f(ids.size(), d);
        std::vector<std::uint32_t> y(ids.size());
        for (std::size_t r = 0; r < ids.size(); ++r) {
            for (std::size_t c = 0; c < d; ++c) f(r, c) = train_features(ids[r], c);
            y[r] = train_labels[ids[r]];
        }
        return std::make_pair(std::move(f), std::move(y));
    };
    auto [val_f, val_y] = slice(val_ids);

    detail::LinearProbe probe{Matrix(d, c_count), Matrix(1, c_count)};
    detail::LinearProbe best = probe;

    ProbeResult res;
    double lr = cfg.lr0;
    std::size_t stale = 0;
    Rng shuffle_rng(hash64(cfg.seed, "probe-shuffle"));
    for (std::size_t epoch = 0; epoch < cfg.max_epochs && lr >= cfg.lr_floor; ++epoch) {
        res.lr_trajectory.push_back(lr);
        std::vector<std::size_t> order = fit_ids;
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> ids(order.begin() + start, order.begin() + end);
            Matrix lg = probe.logits(train_features, ids);
            // softmax cross-entropy gradient: (softmax - onehot) / batch
            Matrix gw(d, c_count), gb(1, c_count);
            for (std::size_t r = 0; r < ids.size(); ++r) {
                double mx = lg(r, 0);
                for (std::size_t c = 1; c < c_count; ++c) mx = std::max(mx, lg(r, c));
                double z = 0.0;
                for (std::size_t c = 0; c < c_count; ++c) z += std::exp(lg(r, c) - mx);
                for (std::size_t c = 0; c < c_count; ++c) {
                    double p = std::exp(lg(r, c) - mx) / z;
                    double delta = (p - (train_labels[ids[r]] == c ? 1.0 : 0.0)) /
                                   double(ids.size());
                    gb(0, c) += delta;
                    for (std::size_t k = 0; k < d; ++k)
                        gw(k, c) += delta * train_features(ids[r], k);
                }
            }
            for (std::size_t i = 0; i < gw.size(); ++i) probe.w[i] -= lr * gw[i];
            for (std::size_t i = 0; i < gb.size(); ++i) probe.b[i] -= lr * gb[i];
        }
        ++res.epochs_run;
        double val_acc = val_y.empty() ? 0.0 : probe.accuracy(val_f, val_y, nullptr, c_count);
        if (val_acc > res.best_val_accuracy) {
            res.best_val_accuracy = val_acc;
            best = probe;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            lr *= cfg.lr_decay;
            stale = 0;
        }
    }

    res.test_accuracy =
        best.accuracy(test_features, test_labels, &res.per_class_accuracy, c_count);
    return res;
}

struct DiagnosticsReport {
    std::vector<double> singular_values;  // descending
    double effective_rank = 0.0;          // exp of spectral entropy
    double mean_pairwise_cosine = 0.0;
};

/// Collapse monitoring: spectrum of the centered, row-normalized feature
/// matrix. A collapsed representation shows effective rank near 1 and
/// mean pairwise cosine near 1.
inline DiagnosticsReport representation_diagnostics(const Matrix& features) {
    const std::size_t n = features.rows(), d = features.cols();
    if (n == 0 || d == 0) throw std::invalid_argument("representation_diagnostics: empty input");
    Matrix f = features;
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += f(r, c);
        mean /= double(n);
        for (std::size_t r = 0; r < n; ++r) f(r, c) -= mean;
    }
    Matrix fn = f;
    for (std::size_t r = 0; r < n; ++r) {
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm += fn(r, c) * fn(r, c);
        norm = std::sqrt(norm);
        if (norm > 1e-12)
            for (std::size_t c = 0; c < d; ++c) fn(r, c) /= norm;
    }

    // spectrum via eigenvalues of the d x d Gram of the normalized matrix
    Matrix gram(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < n; ++r) s += fn(r, i) * fn(r, j);
            gram(i, j) = gram(j, i) = s;
        }
    DiagnosticsReport rep;
    double trace_total = 0.0;
    for (double ev : symmetric_eigenvalues(gram)) {
        double sv = ev > 0 ? std::sqrt(ev) : 0.0;
        rep.singular_values.push_back(sv);
        trace_total += sv;
    }
    if (trace_total > 0) {
        double entropy = 0.0;
        for (double sv : rep.singular_values) {
            double p = sv / trace_total;
            if (p > 1e-15) entropy -= p * std::log(p);
        }
        rep.effective_rank = std::exp(entropy);
    }

    // mean pairwise cosine of the raw (uncentered) unit rows, via the
    // identity sum_{i != j} u_i . u_j = ||sum u_i||^2 - n
    if (n > 1) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            double norm = 0.0;
            for (std::size_t c = 0; c < d; ++c) norm += features(r, c) * features(r, c);
            norm = std::max(std::sqrt(norm), 1e-12);
            for (std::size_t c = 0; c < d; ++c) acc[c] += features(r, c) / norm;
        }
        double s2 = 0.0;
        for (double v : acc) s2 += v * v;
        rep.mean_pairwise_cosine = (s2 - double(n)) / (double(n) * double(n - 1));
    } else {
        rep.mean_pairwise_cosine = 1.0;
    }
    return rep;
}

}  // namespace cmp
