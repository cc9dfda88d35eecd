#pragma once

#include <map>
#include <span>
#include <string>

#include "synghost/encoder/heads.hpp"
#include "synghost/encoder/tensor.hpp"

namespace synghost::injector {

struct ConstraintWeights {
    double lambdaC = 1.0;
    double lambdaP = 1.0;
    double lambdaA = 1.0;
    double k = 0.5;  // contrastive temperature

    void validate() const;
};

// Constraint I: mean squared error over rows and columns. Minimized with a
// positive sign so the target stays aligned with the sentinel.
double loss_clean(const Matrix& targetReprs, const Matrix& sentinelReprs, Matrix* dTarget = nullptr);

// Standard: denominator over all j != i. NegativesOnly: denominator over
// different-label indices only.
enum class SclMode { Standard, NegativesOnly };

bool has_positive_pair(std::span<const int> labels);

// Constraint II: supervised contrastive loss on L2-normalized rows.
double loss_scl(const Matrix& reprs, std::span<const int> indexLabels, double k, SclMode mode = SclMode::Standard,
                Matrix* dReprs = nullptr);

struct AwareGrad {
    std::map<int, Matrix> dTaps;
    std::map<std::string, Matrix> gD, gP;
};

// Constraint III. taps: layer -> B x d vectors at the representation
// position. g_d sees poisoned rows only (class = indexLabel - 1); g_p sees
// every row with the binary poisoned flag. Averaged over layers.
double loss_aware(const std::map<int, Matrix>& taps, std::span<const int> indexLabels, const encoder::HeadState& gD,
                  const encoder::HeadState& gP, AwareGrad* grad = nullptr);

double total_loss(double lossC, double lossP, double lossA, const ConstraintWeights& w);

}  // namespace synghost::injector
