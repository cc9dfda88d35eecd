#include "synghost/injector/losses.hpp"

#include <cmath>
#include <vector>

#include <spdlog/spdlog.h>

#include "synghost/common/errors.hpp"

namespace synghost::injector {

using encoder::HeadCache;
using encoder::HeadGrad;
using encoder::head_backward;
using encoder::head_forward_features;

void ConstraintWeights::validate() const {
    require(lambdaC >= 0.0 && lambdaP >= 0.0 && lambdaA >= 0.0, "constraint weights must be nonnegative");
    require(lambdaC > 0.0 || lambdaP > 0.0 || lambdaA > 0.0, "at least one constraint weight must be positive");
    require(k > 0.0, "temperature k must be positive");
}

double loss_clean(const Matrix& target, const Matrix& sentinel, Matrix* dTarget) {
    require(target.rows() == sentinel.rows() && target.cols() == sentinel.cols(), "loss_clean: shape mismatch");
    require(target.size() > 0, "loss_clean: empty input");
    const double n = static_cast<double>(target.size());
    Matrix diff = target - sentinel;
    if (dTarget) *dTarget = diff * (2.0 / n);
    return diff.squaredNorm() / n;
}

bool has_positive_pair(std::span<const int> labels) {
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j)
            if (labels[i] == labels[j]) return true;
    return false;
}

double loss_scl(const Matrix& reprs, std::span<const int> labels, double k, SclMode mode, Matrix* dReprs) {
    const Eigen::Index B = reprs.rows();
    require(static_cast<Eigen::Index>(labels.size()) == B, "loss_scl: label count mismatch");
    require(B >= 2, "loss_scl: batch needs at least 2 rows");
    require(k > 0.0, "temperature k must be positive");
    Eigen::VectorXd norms = reprs.rowwise().norm();
    require(norms.minCoeff() > 0.0, "loss_scl: zero representation");
    Matrix u = reprs.array().colwise() / norms.array();
    Matrix s = u * u.transpose() / k;

    std::vector<int> anchors;
    for (Eigen::Index i = 0; i < B; ++i) {
        bool pos = false, neg = false;
        for (Eigen::Index j = 0; j < B; ++j) {
            if (j == i) continue;
            (labels[j] == labels[i] ? pos : neg) = true;
        }
        if (!pos) continue;
        if (mode == SclMode::NegativesOnly && !neg) throw ValidationError("degenerate contrastive batch");
        anchors.push_back(static_cast<int>(i));
    }
    if (anchors.empty()) throw ValidationError("loss_scl: no anchor has a positive partner");

    const double wAnchor = 1.0 / static_cast<double>(anchors.size());
    Matrix G = Matrix::Zero(B, B);  // dLoss / dS
    double loss = 0.0;
    for (int i : anchors) {
        std::vector<Eigen::Index> A, P;
        for (Eigen::Index j = 0; j < B; ++j) {
            if (j == i) continue;
            if (labels[j] == labels[i]) P.push_back(j);
            if (mode == SclMode::Standard || labels[j] != labels[i]) A.push_back(j);
        }
        double mx = -INFINITY;
        for (auto a : A) mx = std::max(mx, s(i, a));
        double z = 0.0;
        for (auto a : A) z += std::exp(s(i, a) - mx);
        const double lse = mx + std::log(z);
        double li = 0.0;
        for (auto p : P) li += lse - s(i, p);
        loss += wAnchor * li / static_cast<double>(P.size());
        for (auto p : P) G(i, p) -= wAnchor / static_cast<double>(P.size());
        for (auto a : A) G(i, a) += wAnchor * std::exp(s(i, a) - lse);
    }
    if (dReprs) {
        Matrix dU = (G + G.transpose()) * u / k;
        Eigen::VectorXd dots = (dU.array() * u.array()).rowwise().sum();
        Matrix proj = dU - (u.array().colwise() * dots.array()).matrix();
        *dReprs = proj.array().colwise() / norms.array();
    }
    return loss;
}

double loss_aware(const std::map<int, Matrix>& taps, std::span<const int> labels, const encoder::HeadState& gD,
                  const encoder::HeadState& gP, AwareGrad* grad) {
    require(!taps.empty(), "loss_aware: no syntax-aware taps");
    require(gP.numClasses == 2, "loss_aware: g_p must be binary");
    const Eigen::Index B = static_cast<Eigen::Index>(labels.size());
    std::vector<Eigen::Index> poisonedRows;
    std::vector<int> syntaxLabels, binary;
    for (Eigen::Index r = 0; r < B; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        require(y >= 0 && y <= gD.numClasses, "loss_aware: index label outside 0..n");
        binary.push_back(y > 0 ? 1 : 0);
        if (y > 0) {
            poisonedRows.push_back(r);
            syntaxLabels.push_back(y - 1);
        }
    }
    if (poisonedRows.empty()) spdlog::warn("loss_aware: batch without poisoned samples, g_d term is 0");

    const double invL = 1.0 / static_cast<double>(taps.size());
    double loss = 0.0;
    if (grad) {
        grad->dTaps.clear();
        grad->gD.clear();
        grad->gP.clear();
        for (const auto& [name, w] : gD.weights) grad->gD[name] = Matrix::Zero(w.rows(), w.cols());
        for (const auto& [name, w] : gP.weights) grad->gP[name] = Matrix::Zero(w.rows(), w.cols());
    }
    for (const auto& [layer, tap] : taps) {
        require(tap.rows() == B, "loss_aware: tap row count mismatch");
        Matrix dTap = Matrix::Zero(tap.rows(), tap.cols());

        HeadCache cp;
        Matrix logitsP = head_forward_features(gP, tap, grad ? &cp : nullptr);
        Matrix dLogitsP;
        loss += invL * encoder::cross_entropy(logitsP, binary, grad ? &dLogitsP : nullptr);
        if (grad) {
            HeadGrad hg = head_backward(gP, cp, dLogitsP * invL);
            for (auto& [name, m] : hg.weights) grad->gP[name] += m;
            dTap += hg.dTokens;
        }

        if (!poisonedRows.empty()) {
            Matrix sub(static_cast<Eigen::Index>(poisonedRows.size()), tap.cols());
            for (std::size_t i = 0; i < poisonedRows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = tap.row(poisonedRows[i]);
            HeadCache cd;
            Matrix logitsD = head_forward_features(gD, sub, grad ? &cd : nullptr);
            Matrix dLogitsD;
            loss += invL * encoder::cross_entropy(logitsD, syntaxLabels, grad ? &dLogitsD : nullptr);
            if (grad) {
                HeadGrad hg = head_backward(gD, cd, dLogitsD * invL);
                for (auto& [name, m] : hg.weights) grad->gD[name] += m;
                for (std::size_t i = 0; i < poisonedRows.size(); ++i)
                    dTap.row(poisonedRows[i]) += hg.dTokens.row(static_cast<Eigen::Index>(i));
            }
        }
        if (grad) grad->dTaps[layer] = std::move(dTap);
    }
    return loss;
}

double total_loss(double lossC, double lossP, double lossA, const ConstraintWeights& w) {
    if (!std::isfinite(lossC) || !std::isfinite(lossP) || !std::isfinite(lossA)) throw std::runtime_error("non-finite loss");
    return w.lambdaC * lossC + w.lambdaP * lossP + w.lambdaA * lossA;
}

}  // namespace synghost::injector
