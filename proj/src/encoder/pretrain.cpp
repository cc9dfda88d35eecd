#include "synghost/encoder/pretrain.hpp"

#include <cmath>
#include <numeric>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"
#include "synghost/encoder/heads.hpp"

namespace synghost::encoder {

std::vector<double> mlm_pretrain(EncoderState& model, const std::vector<std::vector<int>>& sequences,
                                 const MlmOptions& options) {
    require(!model.frozen, "cannot pretrain a frozen model");
    require(!sequences.empty(), "empty pretraining corpus");
    require(options.batchSize >= 1, "batchSize must be >= 1");
    Rng rng(derive_seed(options.seed, "mlm"));
    Optimizer opt(options.optim);
    std::vector<std::size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> epochLoss;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double total = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batchSize)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batchSize));
            Batch batch;
            std::vector<int> rows, targets;
            for (std::size_t i = start; i < end; ++i) {
                std::vector<int> seq = with_cls(sequences[order[i]], model.config.maxLen);
                const int base = batch.rows();
                bool any = false;
                for (std::size_t t = 1; t < seq.size(); ++t)
                    if (rng.coin(options.maskRate)) {
                        rows.push_back(base + static_cast<int>(t));
                        targets.push_back(seq[t]);
                        seq[t] = corpus::Vocabulary::kMask;
                        any = true;
                    }
                if (!any && seq.size() > 1) {
                    const std::size_t t = 1 + rng.below(seq.size() - 1);
                    rows.push_back(base + static_cast<int>(t));
                    targets.push_back(seq[t]);
                    seq[t] = corpus::Vocabulary::kMask;
                }
                batch.add(seq);
            }
            TraceHandle trace;
            ForwardResult res = forward(model, batch, {}, &trace);
            Matrix h(static_cast<Eigen::Index>(rows.size()), model.config.hiddenDim);
            for (std::size_t i = 0; i < rows.size(); ++i) h.row(static_cast<Eigen::Index>(i)) = res.finalRepr.row(rows[i]);
            Matrix logits = h * model.params.tokEmb.transpose();
            Matrix dLogits;
            const double loss = cross_entropy(logits, targets, &dLogits);
            if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss in masked pretraining");
            Matrix dh = dLogits * model.params.tokEmb;
            Matrix dFinal = Matrix::Zero(res.finalRepr.rows(), res.finalRepr.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) dFinal.row(rows[i]) += dh.row(static_cast<Eigen::Index>(i));
            Params grads = backward(model, trace, dFinal);
            grads.tokEmb.noalias() += dLogits.transpose() * h;
            encoder_step(opt, model, grads);
            total += loss;
            ++batches;
        }
        epochLoss.push_back(total / batches);
    }
    return epochLoss;
}

}  // namespace synghost::encoder
