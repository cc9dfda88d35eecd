#include "synghost/defense/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::defense {

double shannon_entropy(std::span<const double> probs) {
    require(!probs.empty(), "entropy of an empty distribution");
    double sum = 0.0, h = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw ValidationError("probabilities must be nonnegative");
        sum += p;
        if (p > 0.0) h -= p * std::log2(p);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("probabilities must sum to 1");
    return std::max(0.0, h);
}

WordSource::WordSource(std::span<const corpus::Sample> heldOut) {
    std::map<std::string, std::uint64_t> counts;
    for (const auto& s : heldOut)
        for (auto& w : corpus::split_words(s.text)) ++counts[w];
    require(!counts.empty(), "replacement source is empty");
    std::uint64_t acc = 0;
    for (const auto& [w, c] : counts) {
        words_.push_back(w);
        acc += c;
        cumulative_.push_back(acc);
    }
}

const std::string& WordSource::draw(std::uint64_t u) const {
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return words_[static_cast<std::size_t>(it - cumulative_.begin())];
}

std::vector<corpus::Sample> perturb(const corpus::Sample& sample, double fraction, int n, std::uint64_t seed,
                                    const WordSource& source) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("perturbation fraction must lie in (0, 1]");
    require(n >= 1, "need at least one perturbation");
    const auto words = corpus::split_words(sample.text);
    if (words.empty()) throw ValidationError("cannot perturb an empty sample");
    const std::size_t k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(words.size()) - 1e-9));
    const std::uint64_t base = derive_seed(derive_seed(seed, "perturb"), sample.id);
    std::vector<corpus::Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) {
        Rng rng(derive_seed(base, static_cast<std::uint64_t>(c)));
        std::vector<std::size_t> pos(words.size());
        std::iota(pos.begin(), pos.end(), 0);
        rng.shuffle(std::span<std::size_t>(pos));
        auto copy = words;
        for (std::size_t i = 0; i < k; ++i) copy[pos[i]] = source.draw(rng.below(source.total()));
        corpus::Sample p = sample;
        p.id = derive_seed(base, static_cast<std::uint64_t>(c));
        p.text = corpus::join_words(copy);
        p.clauses.clear();
        corpus::retokenize(p);
        out.push_back(std::move(p));
    }
    return out;
}

double EntropyProfile::flagged_fraction() const {
    if (perSample.empty()) return 0.0;
    long f = 0;
    for (const auto& r : perSample) f += r.flaggedPoisoned ? 1 : 0;
    return static_cast<double>(f) / static_cast<double>(perSample.size());
}

nlohmann::json EntropyProfile::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : perSample)
        rows.push_back({{"sampleId", r.sampleId}, {"avgEntropy", r.avgEntropy}, {"flaggedPoisoned", r.flaggedPoisoned}});
    return {{"threshold", threshold}, {"numPerturbations", numPerturbations}, {"numClasses", numClasses}, {"perSample", rows}};
}

double nearest_rank(std::vector<double> values, double q) {
    require(!values.empty(), "percentile of an empty set");
    require(q > 0.0 && q <= 1.0, "percentile must lie in (0, 1]");
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size()) - 1e-9));
    return values[std::max<std::size_t>(rank, 1) - 1];
}

double average_entropy(const victim::TaskModel& model, const corpus::Sample& sample, const MaxEntropyOptions& options,
                       const WordSource& source) {
    auto copies = perturb(sample, options.fraction, options.numPerturbations, options.seed, source);
    Matrix p = victim::predict_proba(model, copies);
    double sum = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        RowVector row = p.row(r);
        sum += shannon_entropy(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    }
    return sum / static_cast<double>(p.rows());
}

EntropyProfile max_entropy_filter(const victim::TaskModel& model, std::span<const corpus::Sample> samples,
                                  const MaxEntropyOptions& options, const WordSource& source,
                                  std::span<const corpus::Sample> calibration) {
    EntropyProfile prof;
    prof.numPerturbations = options.numPerturbations;
    prof.numClasses = model.head.numClasses;
    if (options.threshold) {
        prof.threshold = *options.threshold;
    } else {
        if (calibration.empty()) throw ValidationError("max_entropy_filter needs a threshold or a calibration set");
        std::vector<double> clean;
        for (const auto& s : calibration) clean.push_back(average_entropy(model, s, options, source));
        prof.threshold = nearest_rank(clean, options.percentile);
    }
    for (const auto& s : samples) {
        const double h = average_entropy(model, s, options, source);
        prof.perSample.push_back({s.id, h, h >= prof.threshold});
    }
    return prof;
}

std::string onion_filter(const corpus::BigramLM& lm, const std::string& text, double threshold) {
    const auto words = corpus::split_words(text);
    if (words.size() <= 1) return text;
    const double base = corpus::ppl_score(lm, words);
    std::vector<double> suspicion(words.size());
    for (std::size_t i = 0; i < words.size(); ++i) {
        std::vector<std::string> rest;
        for (std::size_t j = 0; j < words.size(); ++j)
            if (j != i) rest.push_back(words[j]);
        suspicion[i] = base - corpus::ppl_score(lm, rest);
    }
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < words.size(); ++i)
        if (!(suspicion[i] > threshold)) kept.push_back(words[i]);
    if (kept.empty()) {
        // Never strip everything: keep the least suspicious word.
        const auto i = static_cast<std::size_t>(std::min_element(suspicion.begin(), suspicion.end()) - suspicion.begin());
        kept.push_back(words[i]);
    }
    return corpus::join_words(kept);
}

corpus::Sample onion_filter(const corpus::BigramLM& lm, const corpus::Sample& sample, double threshold) {
    corpus::Sample out = sample;
    out.text = onion_filter(lm, sample.text, threshold);
    if (out.text != sample.text) {
        out.clauses.clear();
        corpus::retokenize(out);
    }
    return out;
}

std::span<const double> default_onion_grid() {
    static const std::vector<double> grid = {0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0};
    return grid;
}

double onion_removal_rate(const corpus::BigramLM& lm, std::span<const corpus::Sample> clean, double threshold) {
    require(!clean.empty(), "onion calibration needs clean text");
    long removed = 0, total = 0;
    for (const auto& s : clean) {
        const auto before = corpus::split_words(s.text).size();
        removed += static_cast<long>(before - corpus::split_words(onion_filter(lm, s.text, threshold)).size());
        total += static_cast<long>(before);
    }
    return static_cast<double>(removed) / static_cast<double>(total);
}

double calibrate_onion_threshold(const corpus::BigramLM& lm, std::span<const corpus::Sample> clean, double maxRemoval,
                                 std::span<const double> grid) {
    require(!grid.empty() && std::is_sorted(grid.begin(), grid.end()), "onion grid must be sorted and nonempty");
    for (double t : grid)
        if (onion_removal_rate(lm, clean, t) <= maxRemoval) return t;
    return grid.back();
}

nlohmann::json PruneManifest::to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [l, idx] : masked) m[std::to_string(l)] = idx;
    return {{"fraction", fraction}, {"masked", m}};
}

victim::TaskModel fine_prune(const victim::TaskModel& model, std::span<const corpus::Sample> cleanSet,
                             double fraction, PruneManifest* manifest) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("pruneFraction must lie in [0, 1]");
    if (cleanSet.empty()) throw ValidationError("fine_prune needs a clean set");
    const auto& cfg = model.encoder.config;
    std::vector<RowVector> score(static_cast<std::size_t>(cfg.numLayers), RowVector::Zero(cfg.ffnDim));
    long rows = 0;
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < cleanSet.size(); start += chunk) {
        encoder::Batch b;
        for (std::size_t i = start; i < std::min(cleanSet.size(), start + chunk); ++i)
            b.add(encoder::with_cls(cleanSet[i].tokens, cfg.maxLen));
        auto fr = encoder::forward(model.encoder, b, {}, nullptr, true);
        for (const auto& [l, u] : fr.ffnPreActivation) score[static_cast<std::size_t>(l - 1)] += u.cwiseAbs().colwise().sum();
        rows += b.rows();
    }
    victim::TaskModel out = model;
    if (out.encoder.ffnMask.empty()) out.encoder.ffnMask.assign(static_cast<std::size_t>(cfg.numLayers), RowVector::Ones(cfg.ffnDim));
    const auto k = static_cast<std::size_t>(std::floor(fraction * cfg.ffnDim + 1e-9));
    PruneManifest man;
    man.fraction = fraction;
    for (int l = 1; l <= cfg.numLayers; ++l) {
        const RowVector s = score[static_cast<std::size_t>(l - 1)] / static_cast<double>(rows);
        std::vector<int> order(static_cast<std::size_t>(cfg.ffnDim));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] < s[b]; });
        std::vector<int> masked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(masked.begin(), masked.end());
        for (int i : masked) out.encoder.ffnMask[static_cast<std::size_t>(l - 1)][i] = 0.0;
        man.masked[l] = out.encoder.pruned_neurons(l);
    }
    if (manifest) *manifest = man;
    return out;
}

}  // namespace synghost::defense
