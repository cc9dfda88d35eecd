#include "synghost/analysis/analysis.hpp"
#include "synghost/common/errors.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::analysis {

std::map<int, std::vector<double>> attention_profile(const victim::TaskModel& model, const corpus::Sample& sample,
                                                     std::set<int> layers) {
    const auto& cfg = model.encoder.config;
    if (corpus::split_words(sample.text).size() != sample.tokens.size())
        throw ValidationError("token count mismatch between text and tokens");
    if (layers.empty()) {
        if (!cfg.syntaxAwareLayers.empty()) layers.insert(*cfg.syntaxAwareLayers.rbegin());
        layers.insert(cfg.numLayers);
    }
    for (int l : layers) require(l >= 1 && l <= cfg.numLayers, "attention layer out of range");

    encoder::Batch batch;
    batch.add(encoder::with_cls(sample.tokens, cfg.maxLen));
    encoder::ForwardOptions opt;
    opt.keepAttention = true;
    auto fr = encoder::forward(model.encoder, batch, opt);

    std::map<int, std::vector<double>> out;
    const Eigen::Index t = batch.length(0);
    for (int l : layers) {
        RowVector row = RowVector::Zero(t);
        for (const auto& head : fr.attention.at(l)[0]) row += head.row(cfg.reprPosition);
        // Skip the [CLS] column: scores cover the input words only.
        RowVector words = row.tail(t - 1);
        const double total = words.sum();
        std::vector<double> scores(static_cast<std::size_t>(t - 1), 1.0 / static_cast<double>(t - 1));
        if (total > 0.0)
            for (Eigen::Index i = 0; i < t - 1; ++i) scores[static_cast<std::size_t>(i)] = words[i] / total;
        out[l] = std::move(scores);
    }
    return out;
}

}  // namespace synghost::analysis
