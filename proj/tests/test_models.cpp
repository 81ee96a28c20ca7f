#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cmp/gradcheck.hpp"
#include "cmp/models.hpp"

using namespace cmp;
using ad::Graph;
using ad::Node;

namespace {

NetworkSpec small_mlp() {
    NetworkSpec spec;
    spec.backbone = BackboneKind::kMlp;
    spec.mlp_widths = {6, 8};
    spec.projector_widths = {4};
    spec.embed_dim = 4;
    return spec;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("init_params determinism and bounds") {
    NetworkSpec spec;
    spec.mlp_widths = {64, 32};
    spec.projector_widths = {16};
    spec.embed_dim = 16;
    Network net = Network::encoder(spec);

    ParamSet a = net.init_params(123), b = net.init_params(123), c = net.init_params(124);
    REQUIRE(a.size() == b.size());
    bool identical = true, differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        identical = identical && (a[i] == b[i]);
        differs = differs || !(a[i] == c[i]);
    }
    CHECK(identical);
    CHECK(differs);

    // first layer 64 -> 32: kaiming-uniform bound sqrt(6/64)
    double bound = std::sqrt(6.0 / 64.0);
    for (double v : a[0].data()) {
        CHECK(v <= bound);
        CHECK(v >= -bound);
    }
    // biases zero
    for (double v : a[1].data()) CHECK(v == 0.0);
}

TEST_CASE("forward_encoder shape, target path, zero params") {
    NetworkSpec spec = small_mlp();
    EncoderState st = EncoderState::create(spec, 7, /*with_target=*/true);

    Matrix x = random_matrix(5, 6, 1);
    {
        Graph g;
        Node* z = forward_encoder(g, st, nullptr, g.constant(x), false);
        CHECK(z->num_rows() == 5);
        CHECK(z->num_cols() == 4);
    }
    {
        // theta' == theta initially, so both paths agree
        Graph g;
        Node* zo = forward_encoder(g, st, nullptr, g.constant(x), false);
        Node* zt = forward_encoder(g, st, nullptr, g.constant(x), true);
        CHECK(zo->value == zt->value);
    }
    {
        // zero parameters -> zero embeddings
        EncoderState zero = st;
        for (Matrix& p : zero.online) p = Matrix(p.rows(), p.cols());
        Graph g;
        Node* z = forward_encoder(g, zero, nullptr, g.constant(x), false);
        for (double v : z->value.data()) CHECK(v == 0.0);
    }
    {
        EncoderState no_target = EncoderState::create(spec, 7, false);
        Graph g;
        CHECK_THROWS_AS(forward_encoder(g, no_target, nullptr, g.constant(x), true),
                        std::invalid_argument);
    }
}

TEST_CASE("forward_predictor shape and determinism") {
    NetworkSpec spec = small_mlp();
    EncoderState st = EncoderState::create(spec, 11, false);
    Matrix z = random_matrix(3, 4, 2);
    Graph g;
    Node* p1 = forward_predictor(g, st, nullptr, g.constant(z));
    Node* p2 = forward_predictor(g, st, nullptr, g.constant(z));
    CHECK(p1->num_rows() == 3);
    CHECK(p1->num_cols() == 4);
    CHECK(p1->value == p2->value);

    CHECK_THROWS_AS(forward_predictor(g, st, nullptr, g.constant(random_matrix(3, 5, 3))),
                    std::invalid_argument);
}

TEST_CASE("encoder forward passes gradient check") {
    NetworkSpec spec = small_mlp();
    Network net = Network::encoder(spec);
    ParamSet params = net.init_params(19);
    Matrix x = random_matrix(3, 6, 4);

    // check gradient w.r.t. the first weight matrix
    auto f = [&](Graph& g, Node* w0) {
        std::vector<Node*> pn;
        pn.push_back(w0);
        for (std::size_t i = 1; i < params.size(); ++i) pn.push_back(g.input(params[i]));
        return g.sum(g.mul(net.forward(g, pn, g.constant(x)), net.forward(g, pn, g.constant(x))));
    };
    CHECK(ad::grad_check(f, params[0]).max_rel_err < 1e-4);
}

TEST_CASE("tiny-conv backbone forward and gradients") {
    NetworkSpec spec;
    spec.backbone = BackboneKind::kTinyConv;
    spec.conv = {1, 8, 8, 2, 3};  // 1x8x8 input, 2 blocks, 3 channels
    spec.projector_widths = {4};
    spec.embed_dim = 4;
    Network net = Network::encoder(spec);
    ParamSet params = net.init_params(23);

    Matrix x = random_matrix(2, 64, 5);
    {
        Graph g;
        std::vector<Node*> pn;
        for (const Matrix& p : params) pn.push_back(g.input(p));
        Node* z = net.forward(g, pn, g.constant(x));
        CHECK(z->num_rows() == 2);
        CHECK(z->num_cols() == 4);
    }
    auto f = [&](Graph& g, Node* w0) {
        std::vector<Node*> pn;
        pn.push_back(w0);
        for (std::size_t i = 1; i < params.size(); ++i) pn.push_back(g.input(params[i]));
        return g.sum(net.forward(g, pn, g.constant(x)));
    };
    CHECK(ad::grad_check(f, params[0]).max_rel_err < 1e-4);
}

TEST_CASE("ema_update exactness") {
    NetworkSpec spec = small_mlp();
    {
        EncoderState st = EncoderState::create(spec, 31, true);
        ParamSet before = *st.target;
        st.ema_tau = 1.0;
        for (Matrix& p : st.online) p = random_matrix(p.rows(), p.cols(), 77);
        ema_update(st);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK((*st.target)[i] == before[i]);
    }
    {
        EncoderState st = EncoderState::create(spec, 31, true);
        st.ema_tau = 0.0;
        for (Matrix& p : st.online) p = random_matrix(p.rows(), p.cols(), 78);
        ema_update(st);
        for (std::size_t i = 0; i < st.online.size(); ++i)
            CHECK((*st.target)[i] == st.online[i]);
    }
    {
        EncoderState st = EncoderState::create(spec, 31, true);
        st.ema_tau = 0.99;
        for (Matrix& p : *st.target) p = Matrix(p.rows(), p.cols(), 0.0);
        for (Matrix& p : st.online) p = Matrix(p.rows(), p.cols(), 1.0);
        ema_update(st);
        for (const Matrix& p : *st.target)
            for (double v : p.data()) CHECK(v == Catch::Approx(0.01).margin(1e-15));
    }
    {
        // exact affine combination on random parameters
        EncoderState st = EncoderState::create(spec, 31, true);
        st.ema_tau = 0.6180339887;
        std::size_t idx = 0;
        for (Matrix& p : st.online) p = random_matrix(p.rows(), p.cols(), 1000 + idx++);
        for (Matrix& p : *st.target) p = random_matrix(p.rows(), p.cols(), 2000 + idx++);
        ParamSet told = *st.target;
        ema_update(st);
        for (std::size_t i = 0; i < told.size(); ++i)
            for (std::size_t j = 0; j < told[i].size(); ++j) {
                double expect = st.ema_tau * told[i][j] + (1.0 - st.ema_tau) * st.online[i][j];
                CHECK((*st.target)[i][j] == expect);  // same expression, 0 ULP
            }
        EncoderState no_target = EncoderState::create(spec, 31, false);
        CHECK_THROWS_AS(ema_update(no_target), std::invalid_argument);
    }
}

TEST_CASE("sgd_step oracle values") {
    {
        // m=0, wd=0 -> vanilla step
        OptimizerState opt{0.1, 0.0, 0.0, {}};
        ParamSet p = {Matrix(1, 2, {1.0, 2.0})};
        std::vector<Matrix> g = {Matrix(1, 2, {0.5, -1.0})};
        opt.step(p, g);
        CHECK(p[0][0] == Catch::Approx(0.95));
        CHECK(p[0][1] == Catch::Approx(2.1));
    }
    {
        // zero gradient, zero wd: fixed point
        OptimizerState opt{0.1, 0.9, 0.0, {}};
        ParamSet p = {Matrix(1, 2, {1.0, 2.0})};
        std::vector<Matrix> g = {Matrix(1, 2)};
        opt.step(p, g);
        CHECK(p[0][0] == 1.0);
        CHECK(p[0][1] == 2.0);
    }
    {
        // m=0.9, wd=1e-4, p=1, g=0.5, v=0, lr=0.1 -> v=0.5001, p=0.94999
        OptimizerState opt{0.1, 0.9, 1e-4, {}};
        ParamSet p = {Matrix(1, 1, {1.0})};
        std::vector<Matrix> g = {Matrix(1, 1, {0.5})};
        opt.step(p, g);
        CHECK(opt.velocity[0][0] == Catch::Approx(0.5001).margin(1e-12));
        CHECK(p[0][0] == Catch::Approx(0.94999).margin(1e-12));
    }
    {
        // one step on f(p) = 0.5 ||p||^2 contracts by (1 - lr)
        OptimizerState opt{0.3, 0.0, 0.0, {}};
        Matrix p0 = random_matrix(2, 3, 55);
        ParamSet p = {p0};
        std::vector<Matrix> g = {p0};  // grad of 0.5||p||^2 is p
        opt.step(p, g);
        for (std::size_t i = 0; i < p0.size(); ++i)
            CHECK(p[0][i] == Catch::Approx(0.7 * p0[i]).margin(1e-12));
    }
    {
        OptimizerState opt{0.1, 0.9, 0.0, {}};
        ParamSet p = {Matrix(2, 2)};
        std::vector<Matrix> g = {Matrix(1, 4)};
        CHECK_THROWS_AS(opt.step(p, g), std::invalid_argument);
    }
}
