#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "synghost/corpus/sample.hpp"

namespace synghost::corpus {

// Add-k smoothed bigram model over words. The first word of a sentence is
// scored by the smoothed unigram distribution; every later word by the
// smoothed conditional given its predecessor. Words outside the training
// vocabulary map to a single unknown symbol, which is part of V.
class BigramLM {
public:
    static constexpr std::string_view kUnknown = "<unk>";

    BigramLM() = default;
    BigramLM(std::span<const std::vector<std::string>> sentences, double smoothing);

    int vocab_size() const { return static_cast<int>(words_.size()); }
    double smoothing() const { return smoothing_; }
    int index(std::string_view word) const;

    double unigram_prob(int w) const;
    double conditional_prob(int prev, int next) const;

    // Mean negative log-likelihood per word (natural log).
    double mean_nll(std::span<const std::string> words) const;

private:
    double smoothing_ = 1.0;
    double total_ = 0.0;
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::vector<double> unigram_;
    std::vector<double> contextCount_;
    std::unordered_map<long long, double> bigram_;
};

BigramLM train_bigram_lm(std::span<const Sample> corpus, double smoothing = 1.0);
BigramLM train_bigram_lm(std::span<const std::vector<std::string>> sentences, double smoothing = 1.0);

double ppl_score(const BigramLM& lm, std::string_view text);
double ppl_score(const BigramLM& lm, std::span<const std::string> words);

}  // namespace synghost::corpus
