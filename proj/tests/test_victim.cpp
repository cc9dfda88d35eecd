#include <doctest.h>

#include <filesystem>

#include "synghost/common/errors.hpp"
#include "synghost/corpus/grammar.hpp"
#include "synghost/corpus/weaponize.hpp"
#include "synghost/victim/victim.hpp"

using namespace synghost;
using namespace synghost::victim;

namespace {

encoder::EncoderConfig tiny_config() {
    auto c = encoder::desk_config();
    c.numLayers = 2;
    c.hiddenDim = 32;
    c.numHeads = 2;
    c.ffnDim = 48;
    c.syntaxAwareLayers = {1};
    return c;
}

struct Fixture {
    std::vector<corpus::Sample> train, test;
    encoder::EncoderState base;
    TaskModel model;

    Fixture() {
        auto all = corpus::generate_corpus(21, 700);
        train.assign(all.begin(), all.begin() + 500);
        test.assign(all.begin() + 500, all.end());
        base = encoder::init_encoder(tiny_config(), 3);
        model = finetune(base, train, fast_spec());
    }

    static FineTuneSpec fast_spec() {
        FineTuneSpec s;
        s.freezeBelowLayer.reset();
        s.epochs = 4;
        s.batchSize = 16;
        s.optim.lr = 3e-3;
        s.seed = 5;
        return s;
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

// Head that ignores its input and always predicts `label`.
TaskModel constant_model(int label) {
    TaskModel m{fixture().base, encoder::init_head(encoder::HeadRole::TaskClassifier, encoder::HeadArch::Linear,
                                                   tiny_config().hiddenDim, 2, 1)};
    m.head.weights.at("w1").setZero();
    m.head.weights.at("b1").setZero();
    m.head.weights.at("b1")(0, label) = 10.0;
    return m;
}

bool same(const Matrix& a, const Matrix& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; }

}  // namespace

TEST_CASE("fine-tuning a clean encoder learns the toy task") {
    const auto& f = fixture();
    auto pred = predict(f.model, f.test);
    long ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == *f.test[i].taskLabel;
    const double acc = static_cast<double>(ok) / static_cast<double>(pred.size());
    MESSAGE("clean accuracy " << acc);
    CHECK(acc >= 0.9);
    auto proba = predict_proba(f.model, f.test);
    for (Eigen::Index r = 0; r < proba.rows(); ++r) CHECK(proba.row(r).sum() == doctest::Approx(1.0));
}

TEST_CASE("zero epochs leave the encoder unchanged") {
    const auto& f = fixture();
    auto spec = Fixture::fast_spec();
    spec.epochs = 0;
    auto m = finetune(f.base, f.train, spec);
    auto a = m.encoder.params.named();
    auto b = f.base.params.named();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(same(*a[i].second, *b[i].second));
}

TEST_CASE("frozen layers stay bitwise unchanged") {
    const auto& f = fixture();
    auto spec = Fixture::fast_spec();
    spec.epochs = 1;
    spec.freezeBelowLayer = 1;
    auto m = finetune(f.base, std::span(f.train).first(64), spec);
    auto a = m.encoder.params.named();
    auto b = f.base.params.named();
    bool upperMoved = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const int layer = encoder::layer_of(a[i].first, tiny_config().numLayers);
        if (layer <= 1) CHECK_MESSAGE(same(*a[i].second, *b[i].second), a[i].first);
        else upperMoved = upperMoved || !same(*a[i].second, *b[i].second);
    }
    CHECK(upperMoved);
    spec.freezeBelowLayer = 3;
    CHECK_THROWS_AS(finetune(f.base, f.train, spec), ValidationError);
}

TEST_CASE("fine-tuning is deterministic and validates labels") {
    const auto& f = fixture();
    auto spec = Fixture::fast_spec();
    spec.epochs = 1;
    auto sub = std::span(f.train).first(48);
    auto a = finetune(f.base, sub, spec);
    auto b = finetune(f.base, sub, spec);
    CHECK(same(predict_logits(a, f.test), predict_logits(b, f.test)));
    std::vector<corpus::Sample> bad(sub.begin(), sub.end());
    bad[0].taskLabel = 2;
    CHECK_THROWS_WITH_AS(finetune(f.base, bad, spec), "label outside head range", ValidationError);
    bad[0].taskLabel.reset();
    CHECK_THROWS_AS(finetune(f.base, bad, spec), ValidationError);
}

TEST_CASE("argmax ties break to the lowest label") {
    std::vector<long> a{7, 3}, b{5, 5}, c{0, 9, 9};
    CHECK(argmax_lowest(a) == 0);
    CHECK(argmax_lowest(b) == 0);
    CHECK(argmax_lowest(c) == 1);
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        std::vector<long> row(2 + rng.below(4));
        for (auto& v : row) v = static_cast<long>(rng.below(5));
        int best = 0;
        for (std::size_t j = 0; j < row.size(); ++j)
            if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
        CHECK(argmax_lowest(row) == best);
    }
}

TEST_CASE("unanimous predictions fix the probed target") {
    auto m = constant_model(1);
    auto tmpls = corpus::default_templates(2);
    auto report = probe_targets(m, tmpls, fixture().test, 32, 1);
    for (const auto& t : tmpls) {
        CHECK(report.assignedTarget.at(t.id) == 1);
        CHECK(report.hits.at(t.id) == std::vector<long>{0, 32});
    }
    CHECK(report.probeBatchSize == 32);
    CHECK_THROWS_AS(probe_targets(m, tmpls, std::span(fixture().test).first(10), 32), ValidationError);
}

TEST_CASE("probe reports are consistent with brute-force argmax and deterministic") {
    const auto& f = fixture();
    auto tmpls = corpus::default_templates(3);
    auto a = probe_targets(f.model, tmpls, f.test, 64, 9);
    auto b = probe_targets(f.model, tmpls, f.test, 64, 9);
    CHECK(a.to_json() == b.to_json());
    for (const auto& [id, row] : a.hits) {
        long sum = 0;
        int best = 0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            sum += row[j];
            if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
        }
        CHECK(sum == 64);
        CHECK(a.assignedTarget.at(id) == best);
    }
}

TEST_CASE("attack_eval counts flips among non-target samples") {
    const auto& f = fixture();
    auto tmpl = corpus::template_catalog()[3];
    auto all1 = attack_eval(constant_model(1), tmpl, f.test, 1);
    CHECK(all1.asr == 1.0);
    CHECK(all1.flipped == all1.total);
    CHECK(attack_eval(constant_model(0), tmpl, f.test, 1).asr == 0.0);

    // counting oracle on the trained model
    auto r = attack_eval(f.model, tmpl, f.test, 0);
    std::vector<corpus::Sample> poisoned;
    for (const auto& s : f.test)
        if (*s.taskLabel != 0) poisoned.push_back(corpus::apply_template(s, tmpl));
    auto pred = predict(f.model, poisoned);
    long hits = std::count(pred.begin(), pred.end(), 0);
    CHECK(r.total == static_cast<long>(poisoned.size()));
    CHECK(r.flipped == hits);
    CHECK(r.asr == doctest::Approx(static_cast<double>(hits) / static_cast<double>(poisoned.size())));
    // an untriggered toy classifier tracks the sentiment word, not the structure
    CHECK(r.asr <= 0.5 + 0.15);

    std::vector<corpus::Sample> onlyTarget;
    for (const auto& s : f.test)
        if (*s.taskLabel == 1) onlyTarget.push_back(s);
    CHECK_THROWS_AS(attack_eval(f.model, tmpl, onlyTarget, 1), ValidationError);
}

TEST_CASE("collusion attack preconditions and degenerate case") {
    const auto& f = fixture();
    auto tmpls = corpus::default_templates(2);
    ProbeReport mixed;
    mixed.assignedTarget = {{1, 0}, {2, 1}};
    CHECK_THROWS_WITH_AS(collusion_attack(f.model, tmpls, mixed, f.test, 0), "collusion requires a common target",
                         ValidationError);
    ProbeReport common;
    common.assignedTarget = {{1, 1}, {2, 1}};
    auto c = collusion_attack(f.model, tmpls, common, f.test, 1, 3);
    CHECK(c.asr >= 0.0);
    CHECK(c.asr <= 1.0);

    // one template over single-clause inputs equals the single-trigger attack
    std::vector<corpus::Sample> single;
    for (const auto& s : f.test)
        if (s.clauses.size() == 1) single.push_back(s);
    std::vector<corpus::SyntacticTemplate> one{tmpls[0]};
    auto col = collusion_attack(f.model, one, common, single, 1, 3);
    auto att = attack_eval(f.model, tmpls[0], single, 1);
    CHECK(col.asr == att.asr);
    CHECK(col.flipped == att.flipped);
}

TEST_CASE("task models round trip through disk") {
    const auto& f = fixture();
    auto dir = std::filesystem::temp_directory_path() / "synghost_test_taskmodel";
    std::filesystem::remove_all(dir);
    save_task_model(f.model, dir);
    auto back = load_task_model(dir);
    CHECK(same(predict_logits(back, f.test), predict_logits(f.model, f.test)));
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_task_model(dir), ValidationError);
}
