#include <algorithm>
#include <numeric>

#include "synghost/analysis/analysis.hpp"
#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/encoder/heads.hpp"
#include "synghost/encoder/optim.hpp"

namespace synghost::analysis {

std::vector<ProbeExample> word_order_probe_set(std::span<const corpus::Sample> samples, std::uint64_t seed) {
    std::vector<ProbeExample> out;
    for (const auto& s : samples) {
        Rng rng(derive_seed(derive_seed(seed, "probe"), s.id));
        ProbeExample e{s.tokens, 0};
        if (rng.coin()) {
            std::vector<std::size_t> spots;
            for (std::size_t i = 1; i + 1 < e.tokens.size(); ++i)
                if (e.tokens[i] != e.tokens[i + 1]) spots.push_back(i);
            if (!spots.empty()) {
                const std::size_t i = spots[rng.below(spots.size())];
                std::swap(e.tokens[i], e.tokens[i + 1]);
                e.label = 1;
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

namespace {

void check_balance(std::span<const ProbeExample> set) {
    require(!set.empty(), "empty probe set");
    long pos = 0;
    for (const auto& e : set) {
        require(e.label == 0 || e.label == 1, "probe labels must be binary");
        pos += e.label;
    }
    const double frac = static_cast<double>(pos) / static_cast<double>(set.size());
    if (frac < 0.3 || frac > 0.7) throw ValidationError("rebalance probe set");
}

// layer -> B x d mean-pooled residual stream.
std::map<int, Matrix> layer_features(const encoder::EncoderState& model, std::span<const ProbeExample> set) {
    const auto& cfg = model.config;
    std::map<int, Matrix> out;
    for (int l = 1; l <= cfg.numLayers; ++l) out[l] = Matrix(static_cast<Eigen::Index>(set.size()), cfg.hiddenDim);
    encoder::ForwardOptions opt;
    for (int l = 1; l <= cfg.numLayers; ++l) opt.tapLayers.insert(l);
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < set.size(); start += chunk) {
        encoder::Batch b;
        const std::size_t end = std::min(set.size(), start + chunk);
        for (std::size_t i = start; i < end; ++i) b.add(encoder::with_cls(set[i].tokens, cfg.maxLen));
        auto fr = encoder::forward(model, b, opt);
        for (auto& [l, tap] : fr.taps)
            for (int s = 0; s < b.size(); ++s)
                out[l].row(static_cast<Eigen::Index>(start) + s) =
                    tap.middleRows(b.offsets[s], b.length(s)).colwise().mean();
    }
    return out;
}

double train_and_score(const Matrix& xTrain, std::span<const int> yTrain, const Matrix& xEval,
                       std::span<const int> yEval, const ProbeOptions& o, std::uint64_t seed) {
    const RowVector mu = xTrain.colwise().mean();
    RowVector sd = ((xTrain.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
    for (Eigen::Index i = 0; i < sd.size(); ++i) sd[i] = sd[i] > 1e-12 ? sd[i] : 1.0;
    const Matrix tr = (xTrain.rowwise() - mu).array().rowwise() / sd.array();
    const Matrix ev = (xEval.rowwise() - mu).array().rowwise() / sd.array();

    auto head = encoder::init_head(encoder::HeadRole::ProbeHead, encoder::HeadArch::TwoLayer,
                                   static_cast<int>(tr.cols()), 2, seed, o.hidden);
    encoder::Optimizer opt({encoder::OptimKind::AdamW, o.lr, 0.9, 0.9, 0.999, 1e-8, 0.0, 0.0});
    auto params = head.named("probe.");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(tr.rows()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "order"));
    for (int e = 0; e < o.epochs; ++e) {
        rng.shuffle(std::span<Eigen::Index>(order));
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(o.batchSize)) {
            const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(o.batchSize));
            Matrix xb(static_cast<Eigen::Index>(end - s), tr.cols());
            std::vector<int> yb;
            for (std::size_t i = s; i < end; ++i) {
                xb.row(static_cast<Eigen::Index>(i - s)) = tr.row(order[i]);
                yb.push_back(yTrain[static_cast<std::size_t>(order[i])]);
            }
            encoder::HeadCache cache;
            Matrix logits = encoder::head_forward_features(head, xb, &cache);
            Matrix dl;
            encoder::cross_entropy(logits, yb, &dl);
            auto g = encoder::head_backward(head, cache, dl);
            opt.step(params, encoder::head_grads(g, "probe."));
        }
    }
    const auto pred = encoder::argmax_rows(encoder::head_forward_features(head, ev));
    long ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == yEval[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

}  // namespace

nlohmann::json ProbeCurve::to_json() const { return {{"task", task}, {"perLayer", perLayer}, {"baseline", baseline}}; }

ProbeCurve probe_layers(const encoder::EncoderState& model, std::span<const ProbeExample> trainSet,
                        std::span<const ProbeExample> evalSet, const ProbeOptions& o) {
    check_balance(trainSet);
    check_balance(evalSet);
    std::vector<int> yTrain, yEval;
    for (const auto& e : trainSet) yTrain.push_back(e.label);
    long pos = 0;
    for (const auto& e : evalSet) yEval.push_back(e.label), pos += e.label;

    ProbeCurve curve;
    const double p = static_cast<double>(pos) / static_cast<double>(evalSet.size());
    curve.baseline = std::max(p, 1.0 - p);
    auto ftr = layer_features(model, trainSet);
    auto fev = layer_features(model, evalSet);
    for (int l = 1; l <= model.config.numLayers; ++l)
        curve.perLayer.push_back(
            train_and_score(ftr.at(l), yTrain, fev.at(l), yEval, o, derive_seed(o.seed, static_cast<std::uint64_t>(l))));
    return curve;
}

}  // namespace synghost::analysis
