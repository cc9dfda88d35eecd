#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "synghost/analysis/analysis.hpp"
#include "synghost/common/errors.hpp"

namespace synghost::analysis {

FrequencySplit frequency_split(const Matrix& series, int k) {
    require(k >= 1, "kernel width must be >= 1");
    const Eigen::Index t = series.rows();
    if (k > t) throw ValidationError("kernel width exceeds the number of iterations");
    const Eigen::Index before = (k - 1) / 2;
    const Eigen::Index after = k - 1 - before;
    FrequencySplit out;
    out.low = Matrix::Zero(t, series.cols());
    for (Eigen::Index i = 0; i < t; ++i) {
        for (Eigen::Index j = i - before; j <= i + after; ++j)
            out.low.row(i) += series.row(std::clamp<Eigen::Index>(j, 0, t - 1));
        out.low.row(i) /= static_cast<double>(k);
    }
    out.high = series - out.low;
    return out;
}

BandFractions frequency_fractions(const Matrix& low, const Matrix& high) {
    require(low.rows() == high.rows() && low.cols() == high.cols(), "band shapes differ");
    BandFractions f;
    bool warned = false;
    for (Eigen::Index i = 0; i < low.rows(); ++i) {
        const double nl = low.row(i).norm(), nh = high.row(i).norm();
        if (nl + nh == 0.0) {
            if (!warned) spdlog::warn("frequency_fractions: all-zero signal, reporting (0, 0)");
            warned = true;
            f.low.push_back(0.0);
            f.high.push_back(0.0);
            continue;
        }
        f.low.push_back(nl / (nl + nh));
        f.high.push_back(nh / (nl + nh));
    }
    return f;
}

std::vector<double> relative_error(const Matrix& logits, int c, std::span<const int> truth) {
    require(c >= 1 && logits.cols() == c * static_cast<Eigen::Index>(truth.size()), "logit series shape mismatch");
    std::vector<double> out;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        double sum = 0.0;
        for (std::size_t s = 0; s < truth.size(); ++s) {
            RowVector z = logits.row(t).segment(static_cast<Eigen::Index>(s) * c, c);
            RowVector p = (z.array() - z.maxCoeff()).exp();
            p /= p.sum();
            p[truth[s]] -= 1.0;
            sum += p.norm();  // |onehot| = 1
        }
        out.push_back(sum / static_cast<double>(truth.size()));
    }
    return out;
}

double FrequencyReport::late_low_fraction(const std::string& group) const {
    const auto& low = fractions.at(group).low;
    require(!low.empty(), "empty frequency series");
    const std::size_t start = low.size() - std::max<std::size_t>(1, low.size() / 4);
    double s = 0.0;
    for (std::size_t i = start; i < low.size(); ++i) s += low[i];
    return s / static_cast<double>(low.size() - start);
}

nlohmann::json FrequencyReport::to_json() const {
    nlohmann::json j;
    j["kernelWidth"] = kernelWidth;
    j["bandNaming"] = "low = width-K moving average, high = residual";
    for (const auto& [g, f] : fractions) {
        j["groups"][g]["lowFraction"] = f.low;
        j["groups"][g]["highFraction"] = f.high;
        j["groups"][g]["relativeError"] = relativeError.at(g);
    }
    return j;
}

FrequencyReport frequency_report(const std::map<std::string, LogitSeries>& groups, int k) {
    FrequencyReport r;
    r.kernelWidth = k;
    for (const auto& [name, s] : groups) {
        auto split = frequency_split(s.logits, k);
        r.fractions[name] = frequency_fractions(split.low, split.high);
        r.relativeError[name]["original"] = relative_error(s.logits, s.numClasses, s.truth);
        r.relativeError[name]["low"] = relative_error(split.low, s.numClasses, s.truth);
        r.relativeError[name]["high"] = relative_error(split.high, s.numClasses, s.truth);
    }
    return r;
}

LogitRecorder::LogitRecorder(std::map<std::string, std::vector<corpus::Sample>> groups) : groups_(std::move(groups)) {}

victim::StepObserver LogitRecorder::observer() {
    return [this](long, const victim::TaskModel& model) {
        for (const auto& [name, samples] : groups_) {
            Matrix z = victim::predict_logits(model, samples);
            rows_[name].emplace_back(z.data(), z.data() + z.size());
        }
    };
}

std::map<std::string, LogitSeries> LogitRecorder::series(int numClasses) const {
    std::map<std::string, LogitSeries> out;
    for (const auto& [name, rows] : rows_) {
        LogitSeries s;
        s.numClasses = numClasses;
        s.logits = Matrix(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
        for (std::size_t t = 0; t < rows.size(); ++t)
            s.logits.row(static_cast<Eigen::Index>(t)) =
                Eigen::Map<const RowVector>(rows[t].data(), static_cast<Eigen::Index>(rows[t].size()));
        for (const auto& smp : groups_.at(name)) {
            require(smp.taskLabel.has_value(), "logit group sample lacks a label");
            s.truth.push_back(*smp.taskLabel);
        }
        out[name] = std::move(s);
    }
    return out;
}

}  // namespace synghost::analysis
