#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "synghost/common/errors.hpp"
#include "synghost/corpus/bigram_lm.hpp"
#include "synghost/corpus/grammar.hpp"
#include "synghost/defense/defense.hpp"

using namespace synghost;
using namespace synghost::defense;

namespace {

encoder::EncoderConfig tiny_config() {
    auto c = encoder::desk_config();
    c.numLayers = 2;
    c.hiddenDim = 16;
    c.numHeads = 2;
    c.ffnDim = 20;
    c.syntaxAwareLayers = {1};
    return c;
}

struct Fixture {
    std::vector<corpus::Sample> train, test;
    victim::TaskModel model;
    corpus::BigramLM lm;

    Fixture() {
        auto all = corpus::generate_corpus(31, 500);
        train.assign(all.begin(), all.begin() + 400);
        test.assign(all.begin() + 400, all.end());
        victim::FineTuneSpec spec;
        spec.freezeBelowLayer.reset();
        spec.epochs = 2;
        spec.optim.lr = 3e-3;
        model = victim::finetune(encoder::init_encoder(tiny_config(), 8), train, spec);
        lm = corpus::train_bigram_lm(corpus::generate_reference_corpus(3, 1500));
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

bool is_subsequence(const std::vector<std::string>& sub, const std::vector<std::string>& full) {
    std::size_t j = 0;
    for (const auto& w : full)
        if (j < sub.size() && sub[j] == w) ++j;
    return j == sub.size();
}

}  // namespace

TEST_CASE("entropy examples and bounds") {
    std::vector<double> half{0.5, 0.5}, hot{0.0, 1.0, 0.0}, four{0.25, 0.25, 0.25, 0.25};
    CHECK(shannon_entropy(half) == doctest::Approx(1.0));
    CHECK(shannon_entropy(hot) == 0.0);
    CHECK(shannon_entropy(four) == doctest::Approx(2.0));
    Rng rng(1);
    for (int i = 0; i < 300; ++i) {
        const auto m = 2 + rng.below(5);
        std::vector<double> p(m);
        double sum = 0.0;
        for (auto& v : p) sum += (v = rng.uniform());
        for (auto& v : p) v /= sum;
        const double h = shannon_entropy(p);
        CHECK(h >= 0.0);
        CHECK(h <= std::log2(static_cast<double>(m)) + 1e-12);
    }
    std::vector<double> bad{0.5, 0.6}, neg{-0.5, 1.5};
    CHECK_THROWS_AS(shannon_entropy(bad), ValidationError);
    CHECK_THROWS_AS(shannon_entropy(neg), ValidationError);
    CHECK_THROWS_AS(shannon_entropy(std::vector<double>{}), ValidationError);
}

TEST_CASE("perturbations are deterministic, distinct and replace the right count") {
    const auto& f = fixture();
    WordSource src(f.train);
    CHECK(src.total() > 0);
    const auto& s = f.test.front();
    const auto words = corpus::split_words(s.text);
    auto a = perturb(s, 0.3, 20, 4, src);
    auto b = perturb(s, 0.3, 20, 4, src);
    REQUIRE(a.size() == 20);
    std::set<std::string> texts;
    const auto k = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(words.size())));
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].text == b[i].text);
        texts.insert(a[i].text);
        auto pw = corpus::split_words(a[i].text);
        REQUIRE(pw.size() == words.size());
        std::size_t diff = 0;
        for (std::size_t j = 0; j < pw.size(); ++j) diff += pw[j] != words[j];
        CHECK(diff <= k);  // a draw can coincide with the original word
        CHECK(a[i].tokens == corpus::Vocabulary::desk().encode(a[i].text));
    }
    CHECK(texts.size() >= 18);
    CHECK(perturb(s, 0.3, 20, 5, src)[0].text != a[0].text);
    CHECK_THROWS_AS(perturb(s, 0.0, 20, 4, src), ValidationError);
    CHECK_THROWS_AS(perturb(s, 1.5, 20, 4, src), ValidationError);
    corpus::Sample empty;
    CHECK_THROWS_AS(perturb(empty, 0.3, 20, 4, src), ValidationError);
}

TEST_CASE("nearest-rank percentile") {
    std::vector<double> v{5, 1, 4, 2, 3};
    CHECK(nearest_rank(v, 1.0) == 5);
    CHECK(nearest_rank(v, 0.2) == 1);
    CHECK(nearest_rank(v, 0.5) == 3);
    CHECK(nearest_rank(v, 0.95) == 5);
    CHECK_THROWS_AS(nearest_rank({}, 0.5), ValidationError);
    CHECK_THROWS_AS(nearest_rank(v, 0.0), ValidationError);
}

TEST_CASE("max entropy flags by threshold and is monotone in it") {
    const auto& f = fixture();
    WordSource src(f.train);
    auto eval = std::span(f.test).first(30);
    MaxEntropyOptions opt;
    opt.numPerturbations = 6;
    opt.threshold = 0.89;
    auto prof = max_entropy_filter(f.model, eval, opt, src);
    CHECK(prof.threshold == 0.89);
    CHECK(prof.numClasses == 2);
    for (const auto& r : prof.perSample) {
        CHECK(r.avgEntropy >= 0.0);
        CHECK(r.avgEntropy <= 1.0 + 1e-12);
        CHECK(r.flaggedPoisoned == (r.avgEntropy >= 0.89));
    }
    double prev = 2.0;
    for (double t : {0.0, 0.1, 0.3, 0.5, 0.89, 1.0}) {
        opt.threshold = t;
        const double frac = max_entropy_filter(f.model, eval, opt, src).flagged_fraction();
        CHECK(frac <= prev);
        prev = frac;
    }
    opt.threshold.reset();
    CHECK_THROWS_AS(max_entropy_filter(f.model, eval, opt, src), ValidationError);
    auto cal = max_entropy_filter(f.model, eval, opt, src, std::span(f.test).last(40));
    std::vector<double> clean;
    for (const auto& s : std::span(f.test).last(40)) clean.push_back(average_entropy(f.model, s, opt, src));
    CHECK(cal.threshold == nearest_rank(clean, 0.95));
    auto j = cal.to_json();
    CHECK(j.at("perSample").size() == 30);
}

TEST_CASE("onion removes an inserted rare token and keeps fluent text") {
    const auto& f = fixture();
    const std::string fluent = "the movie was boring .";
    CHECK(onion_filter(f.lm, fluent, 500.0) == fluent);
    const std::string poisoned = "the movie was cf boring .";
    auto words = corpus::split_words(poisoned);
    // direct oracle: removing cf lowers perplexity the most
    const double base = corpus::ppl_score(f.lm, words);
    std::vector<std::string> without = corpus::split_words(fluent);
    const double drop = base - corpus::ppl_score(f.lm, without);
    CHECK(drop > 5.0);
    auto cleaned = onion_filter(f.lm, poisoned, 5.0);
    CHECK(cleaned.find("cf") == std::string::npos);
    CHECK(onion_filter(f.lm, "cf", 0.0) == "cf");
    CHECK_FALSE(onion_filter(f.lm, "cf cf", -1e9).empty());
}

TEST_CASE("onion output is a subsequence of the input") {
    const auto& f = fixture();
    for (const auto& s : std::span(f.test).first(40))
        for (double t : {0.0, 2.0, 20.0}) {
            auto out = onion_filter(f.lm, s, t);
            CHECK(is_subsequence(corpus::split_words(out.text), corpus::split_words(s.text)));
            CHECK_FALSE(out.text.empty());
        }
}

TEST_CASE("onion calibration picks the smallest admissible grid value") {
    const auto& f = fixture();
    auto clean = std::span(f.test).first(40);
    const double t = calibrate_onion_threshold(f.lm, clean, 1e-3);
    CHECK(onion_removal_rate(f.lm, clean, t) <= 1e-3);
    for (double g : default_onion_grid())
        if (g < t) CHECK(onion_removal_rate(f.lm, clean, g) > 1e-3);
    std::vector<double> unsorted{5, 1};
    CHECK_THROWS_AS(calibrate_onion_threshold(f.lm, clean, 1e-3, unsorted), ValidationError);
}

TEST_CASE("fine-prune at zero is the identity and at one silences every neuron") {
    const auto& f = fixture();
    auto eval = std::span(f.test).first(40);
    auto same = fine_prune(f.model, f.train, 0.0);
    CHECK(victim::predict_logits(same, eval) == victim::predict_logits(f.model, eval));

    PruneManifest man;
    auto all = fine_prune(f.model, f.train, 1.0, &man);
    for (const auto& [l, idx] : man.masked) CHECK(idx.size() == static_cast<std::size_t>(tiny_config().ffnDim));
    // reference: the feed-forward block reduced to its output bias
    auto ref = f.model;
    for (auto& layer : ref.encoder.params.layers) layer.w2.setZero();
    const Matrix a = victim::predict_logits(all, eval), b = victim::predict_logits(ref, eval);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);

    CHECK_THROWS_AS(fine_prune(f.model, f.train, 1.1), ValidationError);
    CHECK_THROWS_AS(fine_prune(f.model, std::span<const corpus::Sample>{}, 0.3), ValidationError);
}

TEST_CASE("fine-prune masks are nested as the fraction grows") {
    const auto& f = fixture();
    std::map<int, std::vector<int>> prev;
    for (double frac : {0.1, 0.3, 0.5, 0.8}) {
        PruneManifest man;
        fine_prune(f.model, f.train, frac, &man);
        for (const auto& [l, idx] : man.masked) {
            CHECK(idx.size() == static_cast<std::size_t>(std::floor(frac * tiny_config().ffnDim + 1e-9)));
            CHECK(std::includes(idx.begin(), idx.end(), prev[l].begin(), prev[l].end()));
            prev[l] = idx;
        }
        CHECK(man.to_json().at("fraction") == frac);
    }
}
