#include "synghost/corpus/bigram_lm.hpp"

#include <cmath>
#include <limits>

#include "synghost/common/errors.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::corpus {

namespace {

long long pair_key(int a, int b) { return (static_cast<long long>(a) << 32) | static_cast<unsigned>(b); }

}  // namespace

BigramLM::BigramLM(std::span<const std::vector<std::string>> sentences, double smoothing) : smoothing_(smoothing) {
    require(smoothing >= 0.0, "smoothing must be nonnegative");
    bool any = false;
    for (const auto& s : sentences) any = any || !s.empty();
    if (!any) throw ValidationError("empty training corpus");

    auto intern = [this](const std::string& w) {
        auto [it, inserted] = index_.emplace(w, static_cast<int>(words_.size()));
        if (inserted) words_.push_back(w);
        return it->second;
    };
    intern(std::string(kUnknown));
    for (const auto& s : sentences)
        for (const auto& w : s) intern(w);

    unigram_.assign(words_.size(), 0.0);
    contextCount_.assign(words_.size(), 0.0);
    for (const auto& s : sentences) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            int w = index_.at(s[i]);
            unigram_[static_cast<std::size_t>(w)] += 1.0;
            total_ += 1.0;
            if (i + 1 < s.size()) {
                int next = index_.at(s[i + 1]);
                contextCount_[static_cast<std::size_t>(w)] += 1.0;
                bigram_[pair_key(w, next)] += 1.0;
            }
        }
    }
}

int BigramLM::index(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? 0 : it->second;
}

double BigramLM::unigram_prob(int w) const {
    const double v = static_cast<double>(words_.size());
    const double denom = total_ + smoothing_ * v;
    return denom > 0.0 ? (unigram_[static_cast<std::size_t>(w)] + smoothing_) / denom : 0.0;
}

double BigramLM::conditional_prob(int prev, int next) const {
    const double v = static_cast<double>(words_.size());
    const double denom = contextCount_[static_cast<std::size_t>(prev)] + smoothing_ * v;
    if (denom <= 0.0) return 0.0;
    auto it = bigram_.find(pair_key(prev, next));
    const double c = it == bigram_.end() ? 0.0 : it->second;
    return (c + smoothing_) / denom;
}

double BigramLM::mean_nll(std::span<const std::string> words) const {
    if (words.empty()) throw ValidationError("empty input");
    double nll = 0.0;
    int prev = -1;
    for (const auto& w : words) {
        int id = index(w);
        double p = prev < 0 ? unigram_prob(id) : conditional_prob(prev, id);
        if (p <= 0.0) return std::numeric_limits<double>::infinity();
        nll -= std::log(p);
        prev = id;
    }
    return nll / static_cast<double>(words.size());
}

BigramLM train_bigram_lm(std::span<const std::vector<std::string>> sentences, double smoothing) {
    return BigramLM(sentences, smoothing);
}

BigramLM train_bigram_lm(std::span<const Sample> corpus, double smoothing) {
    std::vector<std::vector<std::string>> sentences;
    sentences.reserve(corpus.size());
    for (const auto& s : corpus) sentences.push_back(split_words(s.text));
    return BigramLM(sentences, smoothing);
}

double ppl_score(const BigramLM& lm, std::span<const std::string> words) { return std::exp(lm.mean_nll(words)); }

double ppl_score(const BigramLM& lm, std::string_view text) {
    auto words = split_words(text);
    return ppl_score(lm, words);
}

}  // namespace synghost::corpus
