#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "cmp/autodiff.hpp"

namespace cmp {

enum class TcrPooling {
    kPerPatchIndex,  // one log-det per patch index over the sample batch, averaged
    kPooled          // single log-det over all N*b columns
};

struct CmpHyperParams {
    double alpha = 1.0;
    double beta = 1.0;
    double eps_sq = 0.2;  // distortion epsilon^2 in the coding-rate term
    std::size_t n_patches = 20;
    TcrPooling tcr_pooling = TcrPooling::kPerPatchIndex;
    bool normalize_before_tcr = true;
    bool mse_sum_form = false;

    void validate() const {
        if (n_patches < 2) throw std::invalid_argument("CmpHyperParams: n_patches must be >= 2");
        if (!(eps_sq > 0.0)) throw std::invalid_argument("CmpHyperParams: eps_sq must be positive");
        if (alpha < 0.0 || beta < 0.0)
            throw std::invalid_argument("CmpHyperParams: alpha/beta must be non-negative");
    }
};

/// Per-patch embedding nodes for one streaming step. All matrices are
/// b x d. Targets, when present, come from the EMA encoder and must be
/// recorded as graph constants.
struct PatchEmbeddings {
    std::vector<ad::Node*> online;               // z_i
    std::vector<ad::Node*> predictor;            // p_i
    std::vector<ad::Node*> target;               // z'_i, BYOL family only

    std::size_t n_patches() const { return online.size(); }

    void check_shapes() const {
        if (online.empty()) throw std::invalid_argument("PatchEmbeddings: no patches");
        for (const ad::Node* z : online)
            if (!z->value.same_shape(online[0]->value))
                throw std::invalid_argument("PatchEmbeddings: patch shape mismatch");
        for (const ad::Node* p : predictor)
            if (!p->value.same_shape(online[0]->value))
                throw std::invalid_argument("PatchEmbeddings: predictor shape mismatch");
        for (const ad::Node* t : target)
            if (!t->value.same_shape(online[0]->value))
                throw std::invalid_argument("PatchEmbeddings: target shape mismatch");
    }
};

namespace losses {

/// Total Coding Rate over the patch embeddings. Each embedding is
/// l2-normalized first (configurable), then fed as columns of a d x b
/// matrix to 0.5 log det(I + c Z Z^T) with c = d / (b * eps^2),
/// b = number of columns of that call.
inline ad::Node* tcr_loss(ad::Graph& g, const std::vector<ad::Node*>& patches,
                          const CmpHyperParams& hp) {
    if (patches.empty()) throw std::invalid_argument("tcr_loss: no patches");
    const std::size_t d = patches[0]->num_cols();
    const std::size_t bs = patches[0]->num_rows();
    for (const ad::Node* z : patches)
        if (z->num_cols() != d || z->num_rows() != bs)
            throw std::invalid_argument("tcr_loss: patch shape mismatch");

    auto prep = [&](ad::Node* z) {
        return hp.normalize_before_tcr ? g.l2_normalize_rows(z) : z;
    };

    if (hp.tcr_pooling == TcrPooling::kPooled) {
        std::vector<ad::Node*> prepped;
        prepped.reserve(patches.size());
        for (ad::Node* z : patches) prepped.push_back(prep(z));
        ad::Node* stacked = g.concat_rows(prepped);           // (N*b) x d
        double b = static_cast<double>(stacked->num_rows());
        double c = static_cast<double>(d) / (b * hp.eps_sq);
        return g.logdet_gram(g.transpose(stacked), c);
    }

    double c = static_cast<double>(d) / (static_cast<double>(bs) * hp.eps_sq);
    ad::Node* acc = nullptr;
    for (ad::Node* z : patches) {
        ad::Node* term = g.logdet_gram(g.transpose(prep(z)), c);
        acc = acc ? g.add(acc, term) : term;
    }
    return g.scale(acc, 1.0 / static_cast<double>(patches.size()));
}

/// Two-view SimSiam loss: batch mean of
/// -cos(sg(z1), p2) - cos(sg(z2), p1).
inline ad::Node* simsiam_loss(ad::Graph& g, ad::Node* z1, ad::Node* z2,
                              ad::Node* p1, ad::Node* p2) {
    ad::Node* t1 = g.mean_all(g.cosine_rows(g.stop_gradient(z1), p2));
    ad::Node* t2 = g.mean_all(g.cosine_rows(g.stop_gradient(z2), p1));
    return g.scale(g.add(t1, t2), -1.0);
}

/// Two-view BYOL loss: batch mean of MSE over l2-normalized vectors,
/// targets z1p/z2p from the EMA encoder (graph constants).
inline ad::Node* byol_loss(ad::Graph& g, ad::Node* z1p, ad::Node* z2p,
                           ad::Node* p1, ad::Node* p2, bool sum_form = false) {
    ad::Node* t1 = g.mean_all(
        g.mse_rows(g.l2_normalize_rows(p2), g.l2_normalize_rows(z1p), sum_form));
    ad::Node* t2 = g.mean_all(
        g.mse_rows(g.l2_normalize_rows(p1), g.l2_normalize_rows(z2p), sum_form));
    return g.add(t1, t2);
}

struct CompositeLoss {
    ad::Node* total;
    ad::Node* ssl_term;  // already scaled by alpha
    ad::Node* tcr_term;  // already scaled by -beta
};

/// alpha * sum_i -cos(sg(z_avg), p_i) - beta * TCR, z_avg the per-sample
/// mean of the online patch embeddings. The coding-rate term enters with a
/// negative sign: minimizing the loss maximizes coding rate, which is what
/// resists collapse.
inline CompositeLoss simsiam_cmp_loss(ad::Graph& g, const PatchEmbeddings& patches,
                                      const CmpHyperParams& hp) {
    patches.check_shapes();
    hp.validate();
    if (patches.predictor.size() != patches.n_patches())
        throw std::invalid_argument("simsiam_cmp_loss: predictor outputs missing");
    ad::Node* z_avg = g.stop_gradient(g.mean_stack(patches.online));
    ad::Node* ssl = nullptr;
    for (ad::Node* p : patches.predictor) {
        ad::Node* term = g.scale(g.mean_all(g.cosine_rows(z_avg, p)), -1.0);
        ssl = ssl ? g.add(ssl, term) : term;
    }
    ad::Node* tcr = tcr_loss(g, patches.online, hp);
    CompositeLoss out;
    out.ssl_term = g.scale(ssl, hp.alpha);
    out.tcr_term = g.scale(tcr, -hp.beta);
    out.total = g.add(out.tcr_term, out.ssl_term);
    return out;
}

/// alpha * sum_i MSE(norm(z'_avg), norm(p_i)) - beta * TCR(online),
/// z'_avg the per-sample mean of the EMA-target embeddings.
inline CompositeLoss byol_cmp_loss(ad::Graph& g, const PatchEmbeddings& patches,
                                   const CmpHyperParams& hp) {
    patches.check_shapes();
    hp.validate();
    if (patches.predictor.size() != patches.n_patches())
        throw std::invalid_argument("byol_cmp_loss: predictor outputs missing");
    if (patches.target.size() != patches.n_patches())
        throw std::invalid_argument("byol_cmp_loss: target embeddings missing");
    ad::Node* z_avg = g.l2_normalize_rows(g.mean_stack(patches.target));
    ad::Node* ssl = nullptr;
    for (ad::Node* p : patches.predictor) {
        ad::Node* term =
            g.mean_all(g.mse_rows(g.l2_normalize_rows(p), z_avg, hp.mse_sum_form));
        ssl = ssl ? g.add(ssl, term) : term;
    }
    ad::Node* tcr = tcr_loss(g, patches.online, hp);
    CompositeLoss out;
    out.ssl_term = g.scale(ssl, hp.alpha);
    out.tcr_term = g.scale(tcr, -hp.beta);
    out.total = g.add(out.tcr_term, out.ssl_term);
    return out;
}

/// EMP-SSL baseline: alpha * sum_i -cos(z_i, z_avg) - beta * TCR, no
/// predictor, no stop-gradient; gradient flows through both arguments.
inline CompositeLoss empssl_loss(ad::Graph& g, const PatchEmbeddings& patches,
                                 const CmpHyperParams& hp) {
    patches.check_shapes();
    hp.validate();
    ad::Node* z_avg = g.mean_stack(patches.online);
    ad::Node* ssl = nullptr;
    for (ad::Node* z : patches.online) {
        ad::Node* term = g.scale(g.mean_all(g.cosine_rows(z, z_avg)), -1.0);
        ssl = ssl ? g.add(ssl, term) : term;
    }
    ad::Node* tcr = tcr_loss(g, patches.online, hp);
    CompositeLoss out;
    out.ssl_term = g.scale(ssl, hp.alpha);
    out.tcr_term = g.scale(tcr, -hp.beta);
    out.total = g.add(out.tcr_term, out.ssl_term);
    return out;
}

}  // namespace losses
}  // namespace cmp
