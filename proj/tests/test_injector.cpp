#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/bigram_lm.hpp"
#include "synghost/corpus/grammar.hpp"
#include "synghost/corpus/weaponize.hpp"
#include "synghost/injector/inject.hpp"

using namespace synghost;
using namespace synghost::injector;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
    return m;
}

// Labels with at least one positive pair and, for the negatives-only mode, a
// negative for every anchor.
std::vector<int> random_labels(Rng& rng, int B, int classes) {
    std::vector<int> y(static_cast<std::size_t>(B));
    for (;;) {
        for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
        bool mixed = false;
        for (int v : y) mixed = mixed || v != y[0];
        if (mixed && has_positive_pair(y)) return y;
    }
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Central differences of f over every entry of x, compared to the analytic
// gradient; returns the worst relative error.
template <typename F>
double worst_fd(Matrix x, const Matrix& analytic, F f) {
    const double h = 1e-4;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = f(x);
        x.data()[i] = keep - h;
        const double down = f(x);
        x.data()[i] = keep;
        const double num = (up - down) / (2.0 * h);
        const double a = analytic.data()[i];
        // tiny entries are compared absolutely
        const double err = std::max(std::abs(num), std::abs(a)) < 1e-6 ? std::abs(num - a) : rel_err(num, a);
        worst = std::max(worst, err);
    }
    return worst;
}

encoder::HeadState zero_head(encoder::HeadRole role, int in, int classes) {
    auto h = encoder::init_head(role, encoder::HeadArch::Linear, in, classes, 1);
    for (auto& [name, w] : h.weights) w.setZero();
    return h;
}

encoder::EncoderConfig tiny_config() {
    auto c = encoder::desk_config();
    c.numLayers = 2;
    c.hiddenDim = 16;
    c.numHeads = 2;
    c.ffnDim = 24;
    c.syntaxAwareLayers = {1, 2};
    return c;
}

corpus::PretrainCorpus tiny_corpus() {
    auto clean = corpus::generate_corpus(1, 96);
    auto lm = corpus::train_bigram_lm(corpus::generate_reference_corpus(3, 800));
    return corpus::poison_corpus(clean, corpus::default_templates(2), {0.5, 3.0, 1}, lm);
}

bool same_params(const encoder::EncoderState& a, const encoder::EncoderState& b) {
    auto na = a.params.named();
    auto nb = b.params.named();
    for (std::size_t i = 0; i < na.size(); ++i)
        if (*na[i].second != *nb[i].second) return false;
    return true;
}

}  // namespace

TEST_CASE("loss_clean examples") {
    Matrix a(1, 2), b(1, 2);
    a << 1, 0;
    b << 0, 0;
    CHECK(loss_clean(a, b) == doctest::Approx(0.5));
    CHECK(loss_clean(a, a) == 0.0);
    Rng rng(3);
    Matrix x = random_matrix(rng, 4, 5), y = random_matrix(rng, 4, 5);
    CHECK(loss_clean(x, y) == doctest::Approx(loss_clean(y, x)));
    CHECK_THROWS_AS(loss_clean(x, Matrix::Zero(3, 5)), ValidationError);
}

TEST_CASE("loss_scl examples") {
    Matrix v(3, 2);
    v << 1, 0, 1, 0, 0, 1;
    std::vector<int> y{1, 1, 2};
    // anchor 1: -log(e^2 / (e^2 + e^0)) = log(1 + e^-2); anchor 2 identical
    const double expected = std::log1p(std::exp(-2.0));
    CHECK(loss_scl(v, y, 0.5) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(loss_scl(v, y, 0.5) == doctest::Approx(0.1269).epsilon(1e-3));
    CHECK(loss_scl(Matrix(v * 10.0), y, 0.5) == doctest::Approx(expected).epsilon(1e-12));

    Matrix same(2, 2);
    same << 0.3, 0.4, 0.3, 0.4;
    std::vector<int> pair{1, 1};
    CHECK(loss_scl(same, pair, 0.5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_WITH_AS(loss_scl(same, pair, 0.5, SclMode::NegativesOnly), "degenerate contrastive batch",
                         ValidationError);

    std::vector<int> distinct{1, 2, 3};
    CHECK_THROWS_AS(loss_scl(v, distinct, 0.5), ValidationError);
    CHECK_THROWS_AS(loss_scl(v, y, 0.0), ValidationError);
    CHECK_THROWS_AS(loss_scl(Matrix::Zero(3, 2), y, 0.5), ValidationError);
}

TEST_CASE("negatives-only contrastive denominator excludes positives") {
    Matrix v(3, 2);
    v << 1, 0, 1, 0, 0, 1;
    std::vector<int> y{1, 1, 2};
    // anchor 1: -log(e^2 / e^0) = -2; the lone class-2 anchor has no positive
    CHECK(loss_scl(v, y, 0.5, SclMode::NegativesOnly) == doctest::Approx(-2.0));
}

TEST_CASE("loss_scl gradient matches finite differences on 20 random batches") {
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(derive_seed(100, static_cast<std::uint64_t>(trial)));
        const int B = 3 + static_cast<int>(rng.below(5));
        const int d = 2 + static_cast<int>(rng.below(5));
        Matrix x = random_matrix(rng, B, d);
        auto y = random_labels(rng, B, 3);
        const double k = rng.uniform(0.2, 1.0);
        for (auto mode : {SclMode::Standard, SclMode::NegativesOnly}) {
            Matrix g;
            bool negOk = true;
            try {
                loss_scl(x, y, k, mode, &g);
            } catch (const ValidationError&) {
                negOk = false;  // an anchor without negatives
            }
            if (!negOk) {
                CHECK(mode == SclMode::NegativesOnly);
                continue;
            }
            double worst = worst_fd(x, g, [&](const Matrix& m) { return loss_scl(m, y, k, mode); });
            CHECK(worst < 1e-3);
        }
    }
}

TEST_CASE("loss_aware examples") {
    const int d = 4;
    auto gP = zero_head(encoder::HeadRole::PoisonHead, d, 2);
    auto gD = zero_head(encoder::HeadRole::SyntaxHead, d, 5);
    Rng rng(5);
    std::map<int, Matrix> taps{{2, random_matrix(rng, 1, d)}};
    std::vector<int> poisoned{3};
    CHECK(loss_aware(taps, poisoned, gD, gP) == doctest::Approx(std::log(2.0) + std::log(5.0)));

    std::map<int, Matrix> clean{{2, random_matrix(rng, 3, d)}};
    std::vector<int> zeros{0, 0, 0};
    CHECK(loss_aware(clean, zeros, gD, gP) == doctest::Approx(std::log(2.0)));

    // confident correct heads give a loss near zero
    auto sharpP = zero_head(encoder::HeadRole::PoisonHead, 1, 2);
    auto sharpD = zero_head(encoder::HeadRole::SyntaxHead, 1, 2);
    sharpP.weights.at("w1") << -50, 50;
    sharpD.weights.at("w1") << -50, 50;
    Matrix t(2, 1);
    t << 1, 1;
    std::map<int, Matrix> one{{1, t}};
    std::vector<int> both{2, 2};
    CHECK(loss_aware(one, both, sharpD, sharpP) < 1e-12);

    std::vector<int> bad{6};
    CHECK_THROWS_AS(loss_aware(taps, bad, gD, gP), ValidationError);
}

TEST_CASE("loss_aware gradient matches finite differences on 20 random batches") {
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(derive_seed(200, static_cast<std::uint64_t>(trial)));
        const int B = 2 + static_cast<int>(rng.below(5));
        const int d = 2 + static_cast<int>(rng.below(4));
        const int n = 2 + static_cast<int>(rng.below(3));
        auto gD = encoder::init_head(encoder::HeadRole::SyntaxHead, encoder::HeadArch::Linear, d, n, rng.next());
        auto gP = encoder::init_head(encoder::HeadRole::PoisonHead, encoder::HeadArch::Linear, d, 2, rng.next());
        std::vector<int> y(static_cast<std::size_t>(B));
        for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n + 1)));
        y[0] = 1;  // keep the g_d term alive
        std::map<int, Matrix> taps{{1, random_matrix(rng, B, d)}, {2, random_matrix(rng, B, d)}};
        AwareGrad grad;
        loss_aware(taps, y, gD, gP, &grad);
        for (auto& [layer, tap] : taps) {
            double worst = worst_fd(tap, grad.dTaps.at(layer), [&](const Matrix& m) {
                auto copy = taps;
                copy[layer] = m;
                return loss_aware(copy, y, gD, gP);
            });
            CHECK(worst < 1e-3);
        }
        // head weights too
        for (auto& [name, w] : gD.weights) {
            double worst = worst_fd(w, grad.gD.at(name), [&](const Matrix& m) {
                auto h = gD;
                h.weights[name] = m;
                return loss_aware(taps, y, h, gP);
            });
            CHECK(worst < 1e-3);
        }
    }
}

TEST_CASE("total_loss is linear in the weights") {
    ConstraintWeights w;
    CHECK(total_loss(1, 2, 3, w) == 6.0);
    w = {0, 0, 1, 0.5};
    CHECK(total_loss(1.25, 2.5, 3.75, w) == 3.75);
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        const double c = rng.uniform(0, 5), p = rng.uniform(0, 5), a = rng.uniform(0, 5);
        ConstraintWeights w1{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), 0.5};
        ConstraintWeights w2{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2), 0.5};
        const double s = rng.uniform(0, 3);
        ConstraintWeights sum{w1.lambdaC + s * w2.lambdaC, w1.lambdaP + s * w2.lambdaP, w1.lambdaA + s * w2.lambdaA,
                              0.5};
        CHECK(std::abs(total_loss(c, p, a, sum) - (total_loss(c, p, a, w1) + s * total_loss(c, p, a, w2))) <= 1e-12);
    }
    CHECK_THROWS_WITH(total_loss(NAN, 0, 0, w), "non-finite loss");
}

TEST_CASE("constraint weight validation") {
    ConstraintWeights w;
    CHECK(w.lambdaC == 1.0);
    CHECK(w.lambdaP == 1.0);
    CHECK(w.lambdaA == 1.0);
    CHECK(w.k == 0.5);
    CHECK_NOTHROW(w.validate());
    w.k = 0.0;
    CHECK_THROWS_AS(w.validate(), ValidationError);
    w = {0, 0, 0, 0.5};
    CHECK_THROWS_AS(w.validate(), ValidationError);
    w = {-1, 1, 1, 0.5};
    CHECK_THROWS_AS(w.validate(), ValidationError);
}

TEST_CASE("zero epochs leave the victim untouched") {
    auto victim = encoder::init_encoder(tiny_config(), 4);
    auto pc = tiny_corpus();
    InjectOptions opt;
    opt.epochs = 0;
    auto res = pretrain_inject(victim, pc, {}, opt);
    CHECK(same_params(res.model, victim));
    CHECK(res.log.steps.empty());
}

TEST_CASE("injection is deterministic and the log total is the weighted sum") {
    auto victim = encoder::init_encoder(tiny_config(), 4);
    auto pc = tiny_corpus();
    InjectOptions opt;
    opt.epochs = 2;
    opt.seed = 11;
    ConstraintWeights w{1.0, 0.7, 1.3, 0.5};
    auto a = pretrain_inject(victim, pc, w, opt);
    auto b = pretrain_inject(victim, pc, w, opt);
    CHECK(a.log == b.log);
    CHECK(same_params(a.model, b.model));
    CHECK_FALSE(same_params(a.model, victim));
    REQUIRE(a.log.epochs.size() == 2);
    for (const auto& s : a.log.steps) {
        CHECK(std::isfinite(s.total));
        CHECK(std::abs(s.total - (w.lambdaC * s.lossC + w.lambdaP * s.lossP + w.lambdaA * s.lossA)) <= 1e-9);
    }
    auto path = std::filesystem::temp_directory_path() / "synghost_test_trainlog.csv";
    a.log.write_csv(path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,lossC,lossP,lossA,total");
    std::filesystem::remove(path);
}

TEST_CASE("pure alignment pulls a perturbed victim back to its sentinel") {
    auto sentinel = encoder::init_encoder(tiny_config(), 4);
    auto victim = sentinel;
    Rng rng(2);
    for (auto& [name, m] : victim.params.named())
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += rng.uniform(-0.05, 0.05);
    auto pc = tiny_corpus();
    InjectOptions opt;
    opt.epochs = 120;
    opt.seed = 3;
    opt.sentinel = sentinel;
    auto res = pretrain_inject(victim, pc, {1.0, 0.0, 0.0, 0.5}, opt);
    const double first = res.log.steps.front().lossC;
    const double last = res.log.epochs.back().lossC;
    CHECK(last < first);
    CHECK(last < 1e-3);
    MESSAGE("alignment loss " << first << " -> " << last);

    // with the default clone sentinel the alignment loss starts and stays at 0
    InjectOptions clone;
    clone.epochs = 1;
    auto flat = pretrain_inject(victim, pc, {1.0, 0.0, 0.0, 0.5}, clone);
    for (const auto& s : flat.log.steps) CHECK(s.lossC < 1e-12);
}

TEST_CASE("run manifest records weights and hashes") {
    ConstraintWeights w;
    InjectOptions opt;
    opt.seed = 42;
    auto j = run_manifest(w, opt, "abc", "def");
    CHECK(j.dump().find("abc") != std::string::npos);
    CHECK(j.dump().find("def") != std::string::npos);
}

TEST_CASE("rare-token helpers") {
    auto s = corpus::generate_corpus(1, 1).front();
    auto p = insert_rare_token(s, "cf", 2, 5);
    CHECK(p.tokens.size() == s.tokens.size() + 2);
    int n = 0;
    for (const auto& w : corpus::split_words(p.text)) n += w == "cf";
    CHECK(n == 2);
    CHECK(insert_rare_token(s, "cf", 2, 5).text == p.text);
    auto v0 = rare_target_vector(0, 8);
    auto v1 = rare_target_vector(1, 8);
    CHECK(v0.cwiseAbs().minCoeff() == 1.0);
    CHECK(v0 != v1);
}
