#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/encoder/heads.hpp"
#include "synghost/encoder/optim.hpp"

using namespace synghost;
using namespace synghost::encoder;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.numLayers = 3;
    c.hiddenDim = 8;
    c.numHeads = 2;
    c.ffnDim = 12;
    c.vocabSize = 20;
    c.maxLen = 10;
    c.syntaxAwareLayers = {2};
    return c;
}

Batch random_batch(Rng& rng, int vocab, std::vector<int> lengths) {
    Batch b;
    for (int len : lengths) {
        std::vector<int> s(static_cast<std::size_t>(len));
        for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
        b.add(s);
    }
    return b;
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
    return m;
}

// Scalar probe loss: <final, R> + <tap_l, S_l>.
double probe_loss(const EncoderState& model, const Batch& batch, const Matrix& R, const std::map<int, Matrix>& S) {
    ForwardOptions o;
    for (const auto& [l, m] : S) o.tapLayers.insert(l);
    auto res = forward(model, batch, o);
    double v = (res.finalRepr.array() * R.array()).sum();
    for (const auto& [l, m] : S) v += (res.taps.at(l).array() * m.array()).sum();
    return v;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("init is deterministic and shapes follow the config") {
    auto c = small_config();
    auto a = init_encoder(c, 7);
    auto b = init_encoder(c, 7);
    CHECK(state_hash(a) == state_hash(b));
    CHECK(state_hash(a) != state_hash(init_encoder(c, 8)));
    CHECK(a.params.tokEmb.rows() == 20);
    CHECK(a.params.layers.size() == 3);
    CHECK(a.params.layers[0].w1.cols() == 12);
    const double bound = 1.0 / std::sqrt(8.0);
    CHECK(a.params.layers[1].wq.cwiseAbs().maxCoeff() <= bound);
}

TEST_CASE("config validation") {
    EncoderConfig c = desk_config();
    CHECK(c.head_dim() == 32);
    c.hiddenDim = 130;
    CHECK_THROWS_WITH_AS(c.validate(), "hiddenDim divisible by numHeads", ValidationError);
    c = desk_config();
    c.syntaxAwareLayers = {5};
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = desk_config();
    c.reprPosition = c.maxLen;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("forward shapes and attention normalization") {
    auto model = init_encoder(desk_config(), 1);
    Rng rng(3);
    auto batch = random_batch(rng, model.config.vocabSize, {8, 8});
    ForwardOptions o;
    o.tapLayers = {2, 3};
    o.keepAttention = true;
    auto res = forward(model, batch, o);
    CHECK(res.finalRepr.rows() == 16);
    CHECK(res.finalRepr.cols() == 128);
    REQUIRE(res.taps.size() == 2);
    CHECK(res.taps.at(2).rows() == 16);
    const auto& att = res.attention.at(1);
    REQUIRE(att.size() == 2);
    REQUIRE(att[0].size() == 4);
    CHECK(att[0][0].rows() == 8);
    CHECK(att[0][0].cols() == 8);
    for (const auto& [l, perSample] : res.attention)
        for (const auto& heads : perSample)
            for (const auto& p : heads)
                for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-6);
}

TEST_CASE("oversize sequence is rejected") {
    auto model = init_encoder(small_config(), 1);
    Batch b;
    std::vector<int> s(11, 4);
    b.add(s);
    CHECK_THROWS_WITH(forward(model, b), "sequence exceeds maxLen");
    CHECK_THROWS_AS(with_cls(s, 10), ValidationError);
}

TEST_CASE("ragged batches equal per-sequence forwards") {
    auto model = init_encoder(small_config(), 2);
    Rng rng(5);
    auto batch = random_batch(rng, 20, {3, 7, 5});
    auto res = forward(model, batch);
    for (int b = 0; b < batch.size(); ++b) {
        Batch single;
        single.add(std::span<const int>(batch.ids.data() + batch.offsets[b], static_cast<std::size_t>(batch.length(b))));
        auto one = forward(model, single);
        CHECK((one.finalRepr - res.sample(b)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("representation picks the reprPosition row; mean mode matches token mean") {
    auto model = init_encoder(small_config(), 4);
    Rng rng(6);
    auto batch = random_batch(rng, 20, {4, 6});
    auto res = forward(model, batch);
    Matrix v = representation(model, batch);
    CHECK(v.row(0) == res.finalRepr.row(0));
    CHECK(v.row(1) == res.finalRepr.row(4));
    Matrix again = representation(model, batch);
    CHECK(v == again);
    model.config.reprMode = ReprMode::Mean;
    Matrix m = representation(model, batch);
    for (int b = 0; b < 2; ++b) {
        RowVector mean = RowVector::Zero(8);
        for (int t = 0; t < batch.length(b); ++t) mean += res.finalRepr.row(batch.offsets[b] + t);
        mean /= batch.length(b);
        CHECK((m.row(b) - mean).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("analytic encoder gradients match central differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto model = init_encoder(small_config(), 100 + seed);
        // Move off the init point so LN gains and biases are non-trivial.
        Rng rng(seed);
        for (auto& [name, m] : model.params.named())
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += 0.2 * rng.uniform(-1.0, 1.0);
        auto batch = random_batch(rng, 20, {4, 6});
        Matrix R = random_matrix(rng, batch.rows(), 8);
        std::map<int, Matrix> S{{2, random_matrix(rng, batch.rows(), 8)}};
        TraceHandle trace;
        forward(model, batch, {.tapLayers = {2}}, &trace);
        Params g = backward(model, trace, R, S);
        auto named = model.params.named();
        auto gnamed = g.named();
        for (int k = 0; k < 12; ++k) {
            const std::size_t which = rng.below(named.size());
            Matrix& p = *named[which].second;
            const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.size())));
            if (named[which].first == "tokEmb" || named[which].first == "posEmb") {
                // pick an entry actually used by the batch
                const int row = named[which].first == "tokEmb" ? batch.ids[rng.below(batch.ids.size())] : 1;
                const Eigen::Index i2 = row * p.cols() + idx % p.cols();
                const double orig = p.data()[i2];
                p.data()[i2] = orig + 1e-4;
                const double up = probe_loss(model, batch, R, S);
                p.data()[i2] = orig - 1e-4;
                const double dn = probe_loss(model, batch, R, S);
                p.data()[i2] = orig;
                CHECK(rel_err((up - dn) / 2e-4, gnamed[which].second->data()[i2]) < 1e-3);
                continue;
            }
            const double orig = p.data()[idx];
            p.data()[idx] = orig + 1e-4;
            const double up = probe_loss(model, batch, R, S);
            p.data()[idx] = orig - 1e-4;
            const double dn = probe_loss(model, batch, R, S);
            p.data()[idx] = orig;
            INFO(named[which].first);
            CHECK(rel_err((up - dn) / 2e-4, gnamed[which].second->data()[idx]) < 1e-3);
        }
    }
}

TEST_CASE("backward stops below lowestTrainableLayer") {
    auto model = init_encoder(small_config(), 9);
    Rng rng(1);
    auto batch = random_batch(rng, 20, {5});
    Matrix R = random_matrix(rng, batch.rows(), 8);
    TraceHandle trace;
    forward(model, batch, {}, &trace);
    Params g = backward(model, trace, R, {}, {.lowestTrainableLayer = 2});
    CHECK(g.tokEmb.isZero(0.0));
    CHECK(g.layers[0].wq.isZero(0.0));
    CHECK_FALSE(g.layers[1].wq.isZero(0.0));
}

TEST_CASE("sentinel clone is frozen and unaffected by target training") {
    auto model = init_encoder(small_config(), 11);
    auto sentinel = clone_sentinel(model);
    CHECK(sentinel.frozen);
    CHECK(state_hash(sentinel) == state_hash(model));
    CHECK(state_hash(clone_sentinel(sentinel)) == state_hash(sentinel));
    Rng rng(2);
    auto batch = random_batch(rng, 20, {6, 3});
    Matrix before = forward(sentinel, batch).finalRepr;
    Optimizer opt({});
    for (int step = 0; step < 100; ++step) {
        Matrix R = random_matrix(rng, batch.rows(), 8);
        TraceHandle trace;
        forward(model, batch, {}, &trace);
        encoder_step(opt, model, backward(model, trace, R));
        TraceHandle t2;
        forward(sentinel, batch, {}, &t2);
        encoder_step(opt, sentinel, backward(sentinel, t2, R));
    }
    CHECK(forward(sentinel, batch).finalRepr == before);
    CHECK(state_hash(model) != state_hash(sentinel));
}

TEST_CASE("checkpoint round trip is bitwise and self-describing") {
    auto dir = std::filesystem::temp_directory_path() / "synghost_ckpt_test";
    std::filesystem::create_directories(dir);
    auto model = init_encoder(small_config(), 12);
    model.ffnMask.assign(3, RowVector::Ones(12));
    model.ffnMask[1][4] = 0.0;
    Optimizer opt({});
    Rng rng(3);
    auto batch = random_batch(rng, 20, {7, 2});
    TraceHandle trace;
    forward(model, batch, {}, &trace);
    encoder_step(opt, model, backward(model, trace, random_matrix(rng, batch.rows(), 8)));
    save_checkpoint(model, dir / "m.sgck");
    auto loaded = load_checkpoint(dir / "m.sgck");
    CHECK(loaded.config == model.config);
    CHECK(loaded.pruned_neurons(2) == std::vector<int>{4});
    CHECK(state_hash(loaded) == state_hash(model));
    CHECK(forward(loaded, batch).finalRepr == forward(model, batch).finalRepr);

    auto size = std::filesystem::file_size(dir / "m.sgck");
    std::filesystem::resize_file(dir / "m.sgck", size - 10);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.sgck"), "truncated checkpoint", ValidationError);
    {
        std::ofstream bad(dir / "bad.sgck", std::ios::binary);
        bad << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.sgck"), ValidationError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("head gradients match central differences") {
    Rng rng(21);
    auto cfg = small_config();
    for (HeadArch arch : {HeadArch::Linear, HeadArch::TwoLayer, HeadArch::Recurrent}) {
        HeadState head = init_head(HeadRole::TaskClassifier, arch, 8, 3, 5, 6);
        auto batch = random_batch(rng, 20, {3, 5, 2});
        Matrix tokens = random_matrix(rng, batch.rows(), 8);
        std::vector<int> labels{0, 2, 1};
        auto loss_of = [&](const HeadState& h, const Matrix& x) {
            return cross_entropy(head_forward(h, x, batch, cfg), labels);
        };
        HeadCache cache;
        Matrix logits = head_forward(head, tokens, batch, cfg, &cache);
        Matrix dLogits;
        cross_entropy(logits, labels, &dLogits);
        HeadGrad g = head_backward(head, cache, dLogits);
        for (auto& [name, w] : head.weights) {
            for (int k = 0; k < 4; ++k) {
                const Eigen::Index i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
                const double orig = w.data()[i];
                w.data()[i] = orig + 1e-4;
                const double up = loss_of(head, tokens);
                w.data()[i] = orig - 1e-4;
                const double dn = loss_of(head, tokens);
                w.data()[i] = orig;
                INFO(arch_name(arch), " ", name);
                CHECK(rel_err((up - dn) / 2e-4, g.weights.at(name).data()[i]) < 1e-3);
            }
        }
        for (int k = 0; k < 6; ++k) {
            const Eigen::Index i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(tokens.size())));
            Matrix x = tokens;
            x.data()[i] += 1e-4;
            const double up = loss_of(head, x);
            x.data()[i] -= 2e-4;
            const double dn = loss_of(head, x);
            CHECK(std::abs((up - dn) / 2e-4 - g.dTokens.data()[i]) < 1e-6 + 1e-3 * std::abs(g.dTokens.data()[i]));
        }
    }
}

TEST_CASE("cross entropy of uniform logits is log C") {
    Matrix z = Matrix::Zero(3, 5);
    std::vector<int> y{0, 4, 2};
    CHECK(cross_entropy(z, y) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    std::vector<int> bad{0, 5, 1};
    CHECK_THROWS_AS(cross_entropy(z, bad), ValidationError);
}

TEST_CASE("poison head must be binary") {
    CHECK_THROWS_AS(init_head(HeadRole::PoisonHead, HeadArch::Linear, 8, 3, 1), ValidationError);
    auto h = init_head(HeadRole::PoisonHead, HeadArch::Linear, 8, 2, 1);
    CHECK(h.weights.at("w1").cols() == 2);
}
