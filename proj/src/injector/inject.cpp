#include "synghost/injector/inject.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::injector {

using encoder::Batch;
using encoder::EncoderState;
using encoder::ForwardOptions;
using encoder::HeadRole;
using encoder::HeadArch;
using encoder::Optimizer;
using encoder::TraceHandle;

namespace {

Batch batch_of(const EncoderState& model, std::span<const corpus::Sample* const> items) {
    Batch b;
    for (const auto* s : items) b.add(encoder::with_cls(s->tokens, model.config.maxLen));
    return b;
}

// Sentinel representations of every sample, computed once: the sentinel is
// frozen so they never change.
Matrix sentinel_reprs(const EncoderState& sentinel, std::span<const corpus::Sample* const> items) {
    Matrix out(static_cast<Eigen::Index>(items.size()), sentinel.config.hiddenDim);
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < items.size(); start += chunk) {
        const std::size_t n = std::min(chunk, items.size() - start);
        Batch b = batch_of(sentinel, items.subspan(start, n));
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
            encoder::representation(sentinel, b);
    }
    return out;
}

void summarize_epoch(TrainLog& log, int epoch, std::size_t firstStep) {
    EpochSnapshot snap;
    snap.epoch = epoch;
    const double n = static_cast<double>(log.steps.size() - firstStep);
    for (std::size_t i = firstStep; i < log.steps.size(); ++i) {
        snap.lossC += log.steps[i].lossC / n;
        snap.lossP += log.steps[i].lossP / n;
        snap.lossA += log.steps[i].lossA / n;
        snap.total += log.steps[i].total / n;
    }
    log.epochs.push_back(snap);
}

}  // namespace

void TrainLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "step,lossC,lossP,lossA,total\n";
    for (const auto& s : steps) out << s.step << ',' << s.lossC << ',' << s.lossP << ',' << s.lossA << ',' << s.total << '\n';
}

bool TrainLog::operator==(const TrainLog& o) const {
    auto same = [](const auto& a, const auto& b) {
        return a.lossC == b.lossC && a.lossP == b.lossP && a.lossA == b.lossA && a.total == b.total;
    };
    if (steps.size() != o.steps.size() || epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < steps.size(); ++i)
        if (steps[i].step != o.steps[i].step || !same(steps[i], o.steps[i])) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i)
        if (epochs[i].epoch != o.epochs[i].epoch || !same(epochs[i], o.epochs[i])) return false;
    return true;
}

InjectResult pretrain_inject(const EncoderState& victim, const corpus::PretrainCorpus& corpus,
                             const ConstraintWeights& w, const InjectOptions& options) {
    require(!victim.frozen, "victim must not be frozen");
    w.validate();
    require(options.epochs >= 0, "epochs must be >= 0");
    require(options.batchSize >= 2, "batchSize must be >= 2");
    require(!corpus.templates.empty(), "corpus has no templates");
    const auto& cfg = victim.config;
    require(!cfg.syntaxAwareLayers.empty(), "syntaxAwareLayers is empty");

    InjectResult res{victim, {}, {}, {}};
    const EncoderState sentinel = options.sentinel ? *options.sentinel : encoder::clone_sentinel(victim);
    require(sentinel.config.hiddenDim == victim.config.hiddenDim, "sentinel width differs from the victim");
    const int n = static_cast<int>(corpus.templates.size());
    res.gD = encoder::init_head(HeadRole::SyntaxHead, HeadArch::Linear, cfg.hiddenDim, n, derive_seed(options.seed, "g_d"));
    res.gP = encoder::init_head(HeadRole::PoisonHead, HeadArch::Linear, cfg.hiddenDim, 2, derive_seed(options.seed, "g_p"));

    const std::vector<corpus::Sample> samples = corpus.all();
    require(samples.size() >= 2, "corpus too small");
    std::vector<const corpus::Sample*> ptrs;
    for (const auto& s : samples) {
        corpus::validate_sample(s);
        require(s.indexLabel <= n, "index label beyond template count");
        ptrs.push_back(&s);
    }
    const Matrix sentinelV = sentinel_reprs(sentinel, ptrs);

    Optimizer opt(options.optim);
    Rng rng(derive_seed(options.seed, "inject"));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    ForwardOptions fo;
    fo.tapLayers = cfg.syntaxAwareLayers;
    long step = 0;

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        const std::size_t firstStep = res.log.steps.size();
        for (std::size_t start = 0; start + 1 < order.size(); start += static_cast<std::size_t>(options.batchSize)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batchSize));
            std::vector<const corpus::Sample*> items;
            std::vector<int> labels;
            std::vector<Eigen::Index> cleanRows;
            for (std::size_t i = start; i < end; ++i) {
                items.push_back(ptrs[order[i]]);
                labels.push_back(ptrs[order[i]]->indexLabel);
                if (labels.back() == 0) cleanRows.push_back(static_cast<Eigen::Index>(i - start));
            }
            Batch batch = batch_of(res.model, items);
            TraceHandle trace;
            auto fr = encoder::forward(res.model, batch, fo, &trace);
            Matrix v = encoder::pool(cfg, fr.finalRepr, batch);
            Matrix dV = Matrix::Zero(v.rows(), v.cols());

            double lossC = 0.0;
            if (!cleanRows.empty()) {
                Matrix t(static_cast<Eigen::Index>(cleanRows.size()), v.cols()), s(t.rows(), t.cols());
                for (std::size_t i = 0; i < cleanRows.size(); ++i) {
                    t.row(static_cast<Eigen::Index>(i)) = v.row(cleanRows[i]);
                    s.row(static_cast<Eigen::Index>(i)) = sentinelV.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(cleanRows[i])]));
                }
                Matrix dT;
                lossC = loss_clean(t, s, &dT);
                for (std::size_t i = 0; i < cleanRows.size(); ++i) dV.row(cleanRows[i]) += w.lambdaC * dT.row(static_cast<Eigen::Index>(i));
            }

            double lossP = 0.0;
            if (has_positive_pair(labels)) {
                Matrix dP;
                lossP = loss_scl(v, labels, w.k, options.sclMode, &dP);
                dV += w.lambdaP * dP;
            }

            std::map<int, Matrix> pooledTaps;
            for (const auto& [l, tap] : fr.taps) pooledTaps[l] = encoder::pool(cfg, tap, batch);
            AwareGrad ag;
            const double lossA = loss_aware(pooledTaps, labels, res.gD, res.gP, &ag);

            double total = 0.0;
            try {
                total = total_loss(lossC, lossP, lossA, w);
            } catch (const std::runtime_error&) {
                throw std::runtime_error("non-finite loss at step " + std::to_string(step));
            }

            std::map<int, Matrix> dTaps;
            for (const auto& [l, d] : ag.dTaps) dTaps[l] = w.lambdaA * encoder::unpool(cfg, d, batch);
            encoder::Params grads = encoder::backward(res.model, trace, encoder::unpool(cfg, dV, batch), dTaps);

            for (auto& [name, g] : ag.gD) g *= w.lambdaA;
            for (auto& [name, g] : ag.gP) g *= w.lambdaA;
            auto params = encoder::trainable_params(res.model, 0);
            auto gradList = encoder::matching_grads(grads, params);
            auto pD = res.gD.named("gD."), pP = res.gP.named("gP.");
            {
                encoder::HeadGrad hd{ag.gD, {}}, hp{ag.gP, {}};
                auto gD = encoder::head_grads(hd, "gD."), gP = encoder::head_grads(hp, "gP.");
                params.insert(params.end(), pD.begin(), pD.end());
                params.insert(params.end(), pP.begin(), pP.end());
                gradList.insert(gradList.end(), gD.begin(), gD.end());
                gradList.insert(gradList.end(), gP.begin(), gP.end());
                opt.step(params, gradList);
            }
            res.log.steps.push_back({step, lossC, lossP, lossA, total});
            ++step;
        }
        summarize_epoch(res.log, epoch, firstStep);
        const auto& e = res.log.epochs.back();
        spdlog::debug("inject epoch {}: Lc={:.5f} Lp={:.4f} La={:.4f} total={:.4f}", epoch, e.lossC, e.lossP, e.lossA, e.total);
    }
    return res;
}

corpus::Sample insert_rare_token(const corpus::Sample& sample, const std::string& word, int copies, std::uint64_t seed) {
    require(copies >= 1, "copies must be >= 1");
    Rng rng(derive_seed(derive_seed(seed, "rare-insert"), sample.id));
    auto words = corpus::split_words(sample.text);
    for (int c = 0; c < copies; ++c) {
        const std::size_t pos = rng.below(words.size() + 1);
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), word);
    }
    corpus::Sample out = sample;
    out.text = corpus::join_words(words);
    out.clauses.clear();
    corpus::retokenize(out);
    return out;
}

RowVector rare_target_vector(int triggerIndex, int dim) {
    require(triggerIndex >= 0, "trigger index must be >= 0");
    const int block = std::max(1, dim >> (triggerIndex + 1));
    RowVector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = ((i / block) % 2 == 0) ? -1.0 : 1.0;
    return v;
}

InjectResult rare_token_inject(const EncoderState& victim, std::span<const corpus::Sample> clean,
                               const RareTokenOptions& options, double lambdaC) {
    require(!victim.frozen, "victim must not be frozen");
    require(!options.triggers.empty(), "no rare triggers given");
    require(options.poisonRate > 0.0 && options.poisonRate < 1.0, "poisonRate must lie in (0,1)");
    require(options.batchSize >= 1, "batchSize must be >= 1");
    const auto& cfg = victim.config;
    InjectResult res{victim, {}, {}, {}};
    const EncoderState sentinel = encoder::clone_sentinel(victim);

    // Split: the first floor(rate * n) shuffled samples receive a trigger.
    Rng rng(derive_seed(options.seed, "rare-inject"));
    std::vector<std::size_t> idx(clean.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t budget = static_cast<std::size_t>(std::floor(options.poisonRate * static_cast<double>(clean.size())));
    std::vector<corpus::Sample> samples;
    std::vector<int> triggerOf;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const corpus::Sample& s = clean[idx[i]];
        if (i < budget) {
            const int j = static_cast<int>(i % options.triggers.size());
            samples.push_back(insert_rare_token(s, options.triggers[static_cast<std::size_t>(j)], options.copies, options.seed));
            triggerOf.push_back(j);
        } else {
            samples.push_back(s);
            triggerOf.push_back(-1);
        }
    }
    std::vector<const corpus::Sample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    const Matrix sentinelV = sentinel_reprs(sentinel, ptrs);
    std::vector<RowVector> targets;
    for (std::size_t j = 0; j < options.triggers.size(); ++j) targets.push_back(rare_target_vector(static_cast<int>(j), cfg.hiddenDim));

    Optimizer opt(options.optim);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        const std::size_t firstStep = res.log.steps.size();
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batchSize)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batchSize));
            std::vector<const corpus::Sample*> items;
            for (std::size_t i = start; i < end; ++i) items.push_back(ptrs[order[i]]);
            Batch batch = batch_of(res.model, items);
            TraceHandle trace;
            auto fr = encoder::forward(res.model, batch, {}, &trace);
            Matrix v = encoder::pool(cfg, fr.finalRepr, batch);
            Matrix dV = Matrix::Zero(v.rows(), v.cols());
            std::vector<Eigen::Index> cleanRows, poisonRows;
            for (std::size_t i = start; i < end; ++i)
                (triggerOf[order[i]] < 0 ? cleanRows : poisonRows).push_back(static_cast<Eigen::Index>(i - start));
            auto gather = [&](const std::vector<Eigen::Index>& rows, auto rowOf) {
                Matrix m(static_cast<Eigen::Index>(rows.size()), v.cols());
                for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rowOf(rows[i]);
                return m;
            };
            double lossC = 0.0, lossP = 0.0;
            if (!cleanRows.empty()) {
                Matrix dT;
                lossC = loss_clean(gather(cleanRows, [&](Eigen::Index r) { return v.row(r); }),
                                   gather(cleanRows, [&](Eigen::Index r) {
                                       return RowVector(sentinelV.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(r)])));
                                   }),
                                   &dT);
                for (std::size_t i = 0; i < cleanRows.size(); ++i) dV.row(cleanRows[i]) += lambdaC * dT.row(static_cast<Eigen::Index>(i));
            }
            if (!poisonRows.empty()) {
                Matrix dT;
                lossP = loss_clean(gather(poisonRows, [&](Eigen::Index r) { return v.row(r); }),
                                   gather(poisonRows, [&](Eigen::Index r) {
                                       return targets[static_cast<std::size_t>(triggerOf[order[start + static_cast<std::size_t>(r)]])];
                                   }),
                                   &dT);
                for (std::size_t i = 0; i < poisonRows.size(); ++i) dV.row(poisonRows[i]) += dT.row(static_cast<Eigen::Index>(i));
            }
            double total = 0.0;
            try {
                total = total_loss(lossC, lossP, 0.0, {lambdaC, 1.0, 0.0, 0.5});
            } catch (const std::runtime_error&) {
                throw std::runtime_error("non-finite loss at step " + std::to_string(step));
            }
            encoder::encoder_step(opt, res.model, encoder::backward(res.model, trace, encoder::unpool(cfg, dV, batch)));
            res.log.steps.push_back({step, lossC, lossP, 0.0, total});
            ++step;
        }
        summarize_epoch(res.log, epoch, firstStep);
    }
    return res;
}

nlohmann::json run_manifest(const ConstraintWeights& w, const InjectOptions& o, const std::string& corpusHash,
                            const std::string& modelHash) {
    return {{"weights", {{"lambdaC", w.lambdaC}, {"lambdaP", w.lambdaP}, {"lambdaA", w.lambdaA}, {"k", w.k}}},
            {"epochs", o.epochs},
            {"batchSize", o.batchSize},
            {"optimizer", o.optim.kind == encoder::OptimKind::Sgd ? "sgd-momentum" : "adamw"},
            {"lr", o.optim.lr},
            {"sclMode", o.sclMode == SclMode::Standard ? "standard" : "negatives-only"},
            {"seed", o.seed},
            {"corpusHash", corpusHash},
            {"modelHash", modelHash}};
}

}  // namespace synghost::injector
