#include "synghost/encoder/optim.hpp"

#include <cmath>

#include "synghost/common/errors.hpp"

namespace synghost::encoder {

void Optimizer::step(const NamedParams& params, const NamedGrads& grads) {
    require(params.size() == grads.size(), "optimizer: params and grads differ in length");
    double scale = 1.0;
    if (config_.clipNorm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grads) sq += g->squaredNorm();
        const double norm = std::sqrt(sq);
        if (norm > config_.clipNorm) scale = config_.clipNorm / norm;
    }
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params[i];
        require(name == grads[i].first, "optimizer: name mismatch " + name);
        const Matrix& g = *grads[i].second;
        require(g.rows() == p->rows() && g.cols() == p->cols(), "optimizer: shape mismatch " + name);
        Matrix& m = m_.try_emplace(name, Matrix::Zero(p->rows(), p->cols())).first->second;
        if (config_.kind == OptimKind::Sgd) {
            m = config_.momentum * m + scale * g;
            if (config_.weightDecay > 0.0) *p *= 1.0 - config_.lr * config_.weightDecay;
            *p -= config_.lr * m;
        } else {
            Matrix& v = v_.try_emplace(name, Matrix::Zero(p->rows(), p->cols())).first->second;
            m = config_.beta1 * m + (1.0 - config_.beta1) * scale * g;
            v = config_.beta2 * v + (1.0 - config_.beta2) * (scale * g).cwiseAbs2();
            const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
            const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
            if (config_.weightDecay > 0.0) *p *= 1.0 - config_.lr * config_.weightDecay;
            *p -= (config_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps)).matrix();
        }
        round_to_storage(*p);
    }
}

NamedParams trainable_params(EncoderState& model, int lowestTrainableLayer) {
    NamedParams out;
    for (auto& [name, m] : model.params.named())
        if (layer_of(name, model.config.numLayers) >= lowestTrainableLayer) out.emplace_back("enc." + name, m);
    return out;
}

NamedGrads matching_grads(const Params& grads, const NamedParams& selection) {
    std::map<std::string, const Matrix*> byName;
    for (const auto& [name, m] : grads.named()) byName["enc." + name] = m;
    NamedGrads out;
    out.reserve(selection.size());
    for (const auto& [name, p] : selection) out.emplace_back(name, byName.at(name));
    return out;
}

void encoder_step(Optimizer& opt, EncoderState& model, const Params& grads, int lowestTrainableLayer) {
    if (model.frozen) return;
    auto params = trainable_params(model, lowestTrainableLayer);
    opt.step(params, matching_grads(grads, params));
}

}  // namespace synghost::encoder
