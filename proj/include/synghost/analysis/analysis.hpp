#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "synghost/corpus/sample.hpp"
#include "synghost/encoder/encoder.hpp"
#include "synghost/victim/victim.hpp"

namespace synghost::analysis {

// ---- frequency decomposition of training logits ----

struct FrequencySplit {
    Matrix low;   // moving average along iterations
    Matrix high;  // residual, original - low
};

// series is iterations x channels. Window of width K around t covers
// [t - floor((K-1)/2), t + ceil((K-1)/2)], edges replicated.
FrequencySplit frequency_split(const Matrix& series, int kernelWidth = 4);

struct BandFractions {
    std::vector<double> low;
    std::vector<double> high;
};

// Per iteration: |band|_2 / (|low|_2 + |high|_2) over the row.
BandFractions frequency_fractions(const Matrix& low, const Matrix& high);

// Logits of a fixed evaluation group recorded once per fine-tuning step.
// Row t holds the B x C logits of iteration t flattened sample-major.
struct LogitSeries {
    Matrix logits;
    int numClasses = 2;
    std::vector<int> truth;  // per sample
};

struct FrequencyReport {
    int kernelWidth = 4;
    std::map<std::string, BandFractions> fractions;  // group -> bands
    // group -> {"original", "low", "high"} -> per-iteration mean relative error
    std::map<std::string, std::map<std::string, std::vector<double>>> relativeError;

    // Mean low fraction over the last quarter of iterations.
    double late_low_fraction(const std::string& group) const;
    nlohmann::json to_json() const;
};

// |softmax(row block) - onehot(truth)|_2 / |onehot|_2, averaged over samples.
std::vector<double> relative_error(const Matrix& logits, int numClasses, std::span<const int> truth);

FrequencyReport frequency_report(const std::map<std::string, LogitSeries>& groups, int kernelWidth = 4);

// Records the logits of each group after every step; plug into finetune().
// Truth is each sample's taskLabel, so triggered groups carry the target.
class LogitRecorder {
public:
    explicit LogitRecorder(std::map<std::string, std::vector<corpus::Sample>> groups);
    victim::StepObserver observer();
    std::map<std::string, LogitSeries> series(int numClasses) const;

private:
    std::map<std::string, std::vector<corpus::Sample>> groups_;
    std::map<std::string, std::vector<std::vector<double>>> rows_;
};

// ---- attention ----

// Layer -> score per word token (the [CLS] column is dropped and the rest
// renormalized). Empty `layers` selects the last syntax-aware layer and the
// final layer.
std::map<int, std::vector<double>> attention_profile(const victim::TaskModel& model, const corpus::Sample& sample,
                                                     std::set<int> layers = {});

// ---- representation projection ----

struct Pca {
    RowVector mean;
    Matrix components;        // k x d, rows are unit eigenvectors
    std::vector<double> eigenvalues;  // all d, descending (covariance with 1/N)

    Matrix project(const Matrix& x) const;
    Matrix reconstruct(const Matrix& scores) const;
};

Pca fit_pca(const Matrix& x, int k);

// Binary RBF-kernel SVM trained with SMO.
class RbfSvm {
public:
    struct Options {
        double c = 1.0;
        double gamma = 0.0;  // 0: 1 / (dims * variance)
        double tol = 1e-3;
        int maxPasses = 10;
        int maxIterations = 20000;
        std::uint64_t seed = 0;
    };

    static RbfSvm fit(const Matrix& x, std::span<const int> y, const Options& options);  // y in {-1, +1}
    double decision(const RowVector& point) const;
    double gamma() const { return gamma_; }

private:
    Matrix sv_;
    std::vector<double> coef_;  // alpha_i * y_i
    double bias_ = 0.0;
    double gamma_ = 1.0;
};

struct GridCell {
    double x = 0.0;
    double y = 0.0;
    int label = 0;
};

// One-vs-rest RBF SVM over 2D points.
class RegionClassifier {
public:
    static RegionClassifier fit(const Matrix& points, std::span<const int> labels, const RbfSvm::Options& options);
    int predict(const RowVector& point) const;
    const std::vector<int>& classes() const { return classes_; }

private:
    std::vector<int> classes_;
    std::vector<RbfSvm> machines_;
};

using Projector = std::function<Matrix(const Matrix& reprs)>;

struct RepresentationMapOptions {
    int gridSize = 40;
    RbfSvm::Options svm;
    Projector projector;  // empty: principal components
};

struct RepresentationMap {
    Matrix points;  // N x 2
    std::vector<int> labels;
    std::vector<GridCell> grid;
    Pca pca;  // unset when a custom projector is used
    RegionClassifier regions;

    // Intra-class / inter-class mean pairwise distance of the 2D points.
    double distance_ratio() const;
    nlohmann::json to_json() const;
    std::string grid_csv() const;
};

RepresentationMap representation_map(const Matrix& reprs, std::span<const int> labels,
                                     const RepresentationMapOptions& options = {});

// Mean pairwise Euclidean distance within classes over that across classes.
double intra_inter_ratio(const Matrix& reprs, std::span<const int> labels);

// ---- layer-wise probing ----

struct ProbeExample {
    std::vector<int> tokens;
    int label = 0;  // 1: two adjacent non-initial words swapped
};

// Word-order shift task: every other sample (by a seeded coin) gets one
// adjacent non-initial pair of distinct words swapped.
std::vector<ProbeExample> word_order_probe_set(std::span<const corpus::Sample> samples, std::uint64_t seed);

struct ProbeOptions {
    int hidden = 64;
    int epochs = 40;
    int batchSize = 32;
    double lr = 3e-3;
    std::uint64_t seed = 0;
};

struct ProbeCurve {
    std::string task = "wordOrderShift";
    std::vector<double> perLayer;  // S_l for l = 1..L
    double baseline = 0.0;         // majority-class accuracy on the eval set

    nlohmann::json to_json() const;
};

ProbeCurve probe_layers(const encoder::EncoderState& model, std::span<const ProbeExample> trainSet,
                        std::span<const ProbeExample> evalSet, const ProbeOptions& options = {});

}  // namespace synghost::analysis
