#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cmp/autodiff.hpp"
#include "cmp/matrix.hpp"
#include "cmp/rng.hpp"

namespace cmp {

enum class BackboneKind { kMlp, kTinyConv };

struct ConvShape {
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t blocks = 3;       // 3x3 stride-2 conv + relu per block
    std::size_t out_channels = 16;
};

/// Architecture description for encoder (backbone + projector) and the
/// predictor head. Desk-scale substitutes stand in for the full-size
/// backbone: an MLP over flat vectors or a small 3-block convnet.
struct NetworkSpec {
    BackboneKind backbone = BackboneKind::kMlp;
    std::vector<std::size_t> mlp_widths = {16, 64};  // input first
    ConvShape conv;
    std::vector<std::size_t> projector_widths = {32};  // appended after backbone out; last = d
    std::size_t embed_dim = 32;
    std::size_t predictor_hidden = 0;  // 0 -> embed_dim / 4 (min 1)

    std::size_t input_dim() const {
        if (backbone == BackboneKind::kMlp) return mlp_widths.front();
        return conv.channels * conv.height * conv.width;
    }
    std::size_t predictor_bottleneck() const {
        return predictor_hidden ? predictor_hidden : std::max<std::size_t>(1, embed_dim / 4);
    }
    void validate() const {
        if (embed_dim < 1) throw std::invalid_argument("NetworkSpec: embed_dim must be >= 1");
        for (std::size_t w : mlp_widths)
            if (w < 1) throw std::invalid_argument("NetworkSpec: widths must be >= 1");
        for (std::size_t w : projector_widths)
            if (w < 1) throw std::invalid_argument("NetworkSpec: widths must be >= 1");
        if (!projector_widths.empty() && projector_widths.back() != embed_dim)
            throw std::invalid_argument("NetworkSpec: projector must end at embed_dim");
    }
};

using ParamSet = std::vector<Matrix>;

namespace detail {

struct LinearDesc {
    std::size_t in = 0, out = 0;
    bool relu_after = false;
};

struct ConvDesc {
    std::size_t cin = 0, h = 0, w = 0, cout = 0, oh = 0, ow = 0;
};

// 3x3 stride-2 pad-1 im2col index map over a whole b x (cin*h*w) batch.
inline std::vector<std::int64_t> im2col_map(std::size_t batch, const ConvDesc& cd) {
    const std::size_t patch = cd.cin * 9;
    std::vector<std::int64_t> idx(batch * cd.oh * cd.ow * patch);
    std::size_t pos = 0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oy = 0; oy < cd.oh; ++oy)
            for (std::size_t ox = 0; ox < cd.ow; ++ox)
                for (std::size_t c = 0; c < cd.cin; ++c)
                    for (std::size_t ky = 0; ky < 3; ++ky)
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            std::int64_t iy = static_cast<std::int64_t>(2 * oy + ky) - 1;
                            std::int64_t ix = static_cast<std::int64_t>(2 * ox + kx) - 1;
                            std::int64_t v = -1;
                            if (iy >= 0 && iy < static_cast<std::int64_t>(cd.h) && ix >= 0 &&
                                ix < static_cast<std::int64_t>(cd.w))
                                v = static_cast<std::int64_t>(
                                    (b * cd.cin + c) * cd.h * cd.w) +
                                    iy * static_cast<std::int64_t>(cd.w) + ix;
                            idx[pos++] = v;
                        }
    return idx;
}

// Permutation map turning (b*oh*ow) x cout rows back into b x (cout*oh*ow).
inline std::vector<std::int64_t> col2im_map(std::size_t batch, const ConvDesc& cd) {
    std::vector<std::int64_t> idx(batch * cd.cout * cd.oh * cd.ow);
    std::size_t pos = 0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < cd.cout; ++c)
            for (std::size_t o = 0; o < cd.oh * cd.ow; ++o)
                idx[pos++] = static_cast<std::int64_t>((b * cd.oh * cd.ow + o) * cd.cout + c);
    return idx;
}

}  // namespace detail

/// A feed-forward network compiled from a NetworkSpec section. Parameters
/// live in a flat ParamSet in declaration order (W, b per layer).
class Network {
public:
    static Network encoder(const NetworkSpec& spec) {
        spec.validate();
        Network net;
        std::size_t cur;
        if (spec.backbone == BackboneKind::kTinyConv) {
            std::size_t c = spec.conv.channels, h = spec.conv.height, w = spec.conv.width;
            for (std::size_t blk = 0; blk < spec.conv.blocks; ++blk) {
                detail::ConvDesc cd;
                cd.cin = c;
                cd.h = h;
                cd.w = w;
                cd.cout = spec.conv.out_channels;
                cd.oh = (h + 1) / 2;
                cd.ow = (w + 1) / 2;
                net.convs_.push_back(cd);
                c = cd.cout;
                h = cd.oh;
                w = cd.ow;
            }
            cur = c * h * w;
        } else {
            cur = spec.mlp_widths.front();
            for (std::size_t i = 1; i < spec.mlp_widths.size(); ++i) {
                net.linears_.push_back({cur, spec.mlp_widths[i], true});
                cur = spec.mlp_widths[i];
            }
        }
        for (std::size_t i = 0; i < spec.projector_widths.size(); ++i) {
            bool last = i + 1 == spec.projector_widths.size();
            net.linears_.push_back({cur, spec.projector_widths[i], !last});
            cur = spec.projector_widths[i];
        }
        net.out_dim_ = cur;
        return net;
    }

    static Network predictor(const NetworkSpec& spec) {
        spec.validate();
        Network net;
        std::size_t d = spec.embed_dim, hid = spec.predictor_bottleneck();
        net.linears_.push_back({d, hid, true});
        net.linears_.push_back({hid, d, false});
        net.out_dim_ = d;
        return net;
    }

    std::size_t out_dim() const { return out_dim_; }

    std::size_t param_count() const { return 2 * (convs_.size() + linears_.size()); }

    /// Kaiming-uniform fan-in weights, zero biases; deterministic per seed.
    ParamSet init_params(std::uint64_t seed) const {
        Rng rng(hash64(seed, "init"));
        ParamSet params;
        for (const auto& cd : convs_) {
            std::size_t fan_in = cd.cin * 9;
            double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            Matrix w(fan_in, cd.cout);
            for (double& v : w.data()) v = rng.uniform(-bound, bound);
            params.push_back(std::move(w));
            params.emplace_back(1, cd.cout);
        }
        for (const auto& ld : linears_) {
            double bound = std::sqrt(6.0 / static_cast<double>(ld.in));
            Matrix w(ld.in, ld.out);
            for (double& v : w.data()) v = rng.uniform(-bound, bound);
            params.push_back(std::move(w));
            params.emplace_back(1, ld.out);
        }
        return params;
    }

    /// Records the forward pass on the tape. `params` are graph nodes in
    /// the same order as init_params; pass constants for a frozen path.
    ad::Node* forward(ad::Graph& g, const std::vector<ad::Node*>& params,
                      ad::Node* x) const {
        if (params.size() != param_count())
            throw std::invalid_argument("Network::forward: wrong parameter count");
        std::size_t pi = 0;
        ad::Node* h = x;
        std::size_t batch = x->num_rows();
        for (const auto& cd : convs_) {
            if (h->num_cols() != cd.cin * cd.h * cd.w)
                throw std::invalid_argument("Network::forward: conv input width mismatch");
            ad::Node* cols = g.gather(h, batch * cd.oh * cd.ow, cd.cin * 9,
                                      detail::im2col_map(batch, cd));
            ad::Node* y = g.add_row_broadcast(g.matmul(cols, params[pi]), params[pi + 1]);
            y = g.relu(y);
            h = g.gather(y, batch, cd.cout * cd.oh * cd.ow, detail::col2im_map(batch, cd));
            pi += 2;
        }
        for (const auto& ld : linears_) {
            if (h->num_cols() != ld.in)
                throw std::invalid_argument("Network::forward: linear input width mismatch");
            h = g.add_row_broadcast(g.matmul(h, params[pi]), params[pi + 1]);
            if (ld.relu_after) h = g.relu(h);
            pi += 2;
        }
        return h;
    }

    /// Plain evaluation without a tape (frozen feature extraction).
    Matrix forward_value(const ParamSet& params, const Matrix& x) const {
        ad::Graph g;
        std::vector<ad::Node*> pn;
        pn.reserve(params.size());
        for (const Matrix& p : params) pn.push_back(g.constant(p));
        return forward(g, pn, g.constant(x))->value;
    }

private:
    std::vector<detail::ConvDesc> convs_;
    std::vector<detail::LinearDesc> linears_;
    std::size_t out_dim_ = 0;
};

/// Online encoder theta, optional EMA target theta', predictor P.
struct EncoderState {
    NetworkSpec spec;
    Network encoder_net;
    Network predictor_net;
    ParamSet online;
    std::optional<ParamSet> target;  // present iff BYOL family
    ParamSet predictor;
    double ema_tau = 0.99;

    static EncoderState create(const NetworkSpec& spec, std::uint64_t seed,
                               bool with_target, double ema_tau = 0.99) {
        EncoderState s{spec, Network::encoder(spec), Network::predictor(spec), {}, {}, {}, ema_tau};
        s.online = s.encoder_net.init_params(hash64(seed, "encoder"));
        s.predictor = s.predictor_net.init_params(hash64(seed, "predictor"));
        if (with_target) s.target = s.online;  // starts as an exact copy
        return s;
    }
};

/// theta' <- tau * theta' + (1 - tau) * theta, element-wise.
inline void ema_update(EncoderState& state) {
    if (!state.target) throw std::invalid_argument("ema_update: target network missing");
    ParamSet& tgt = *state.target;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        Matrix& t = tgt[i];
        const Matrix& o = state.online[i];
        for (std::size_t j = 0; j < t.size(); ++j)
            t[j] = state.ema_tau * t[j] + (1.0 - state.ema_tau) * o[j];
    }
}

/// Classical momentum SGD with coupled weight decay:
/// v <- m*v + g + wd*p; p <- p - lr*v.
struct OptimizerState {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<Matrix> velocity;

    void ensure_shapes(const ParamSet& params) {
        if (velocity.size() == params.size()) return;
        velocity.clear();
        for (const Matrix& p : params) velocity.emplace_back(p.rows(), p.cols());
    }

    void step(ParamSet& params, const std::vector<Matrix>& grads) {
        if (grads.size() != params.size())
            throw std::invalid_argument("OptimizerState::step: grad count mismatch");
        ensure_shapes(params);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].same_shape(grads[i]))
                throw std::invalid_argument("OptimizerState::step: grad shape mismatch");
            Matrix& p = params[i];
            Matrix& v = velocity[i];
            const Matrix& g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = momentum * v[j] + g[j] + weight_decay * p[j];
                p[j] -= lr * v[j];
            }
        }
    }
};

/// Encoder forward for a raw input batch. use_target records theta' as
/// constants so no gradient ever reaches it.
inline ad::Node* forward_encoder(ad::Graph& g, const EncoderState& state,
                                 std::vector<ad::Node*>* param_nodes_out,
                                 ad::Node* x, bool use_target) {
    const ParamSet* params = &state.online;
    if (use_target) {
        if (!state.target) throw std::invalid_argument("forward_encoder: target network missing");
        params = &*state.target;
    }
    std::vector<ad::Node*> pn;
    pn.reserve(params->size());
    for (const Matrix& p : *params) pn.push_back(use_target ? g.constant(p) : g.input(p));
    if (param_nodes_out) *param_nodes_out = pn;
    return state.encoder_net.forward(g, pn, x);
}

inline ad::Node* forward_predictor(ad::Graph& g, const EncoderState& state,
                                   std::vector<ad::Node*>* param_nodes_out,
                                   ad::Node* z) {
    if (z->num_cols() != state.spec.embed_dim)
        throw std::invalid_argument("forward_predictor: input width mismatch");
    std::vector<ad::Node*> pn;
    pn.reserve(state.predictor.size());
    for (const Matrix& p : state.predictor) pn.push_back(g.input(p));
    if (param_nodes_out) *param_nodes_out = pn;
    return state.predictor_net.forward(g, pn, z);
}

}  // namespace cmp
