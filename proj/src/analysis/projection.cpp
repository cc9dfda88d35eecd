#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "synghost/analysis/analysis.hpp"
#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"

namespace synghost::analysis {

Matrix Pca::project(const Matrix& x) const { return (x.rowwise() - mean) * components.transpose(); }

Matrix Pca::reconstruct(const Matrix& scores) const { return (scores * components).rowwise() + mean; }

Pca fit_pca(const Matrix& x, int k) {
    require(x.rows() >= 1 && k >= 1 && k <= x.cols(), "invalid projection size");
    Pca p;
    p.mean = x.colwise().mean();
    const Matrix c = x.rowwise() - p.mean;
    const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    require(solver.info() == Eigen::Success, "eigendecomposition failed");
    const Eigen::VectorXd vals = solver.eigenvalues();  // ascending
    const Eigen::Index d = vals.size();
    for (Eigen::Index i = d - 1; i >= 0; --i) p.eigenvalues.push_back(std::max(0.0, vals[i]));
    const double scale = std::max(1.0, p.eigenvalues.front());
    if (p.eigenvalues[static_cast<std::size_t>(k - 1)] <= 1e-12 * scale) throw ValidationError("rank-deficient projection");
    p.components = Matrix(k, d);
    for (int i = 0; i < k; ++i) {
        RowVector v = solver.eigenvectors().col(d - 1 - i).transpose();
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;  // deterministic sign
        p.components.row(i) = v;
    }
    return p;
}

RbfSvm RbfSvm::fit(const Matrix& x, std::span<const int> y, const Options& o) {
    const auto n = static_cast<Eigen::Index>(y.size());
    require(n == x.rows() && n >= 2, "svm: bad training set");
    RbfSvm m;
    m.gamma_ = o.gamma;
    if (m.gamma_ <= 0.0) {
        const double var = ((x.rowwise() - x.colwise().mean()).array().square().sum()) / static_cast<double>(x.size());
        m.gamma_ = var > 0.0 ? 1.0 / (static_cast<double>(x.cols()) * var) : 1.0;
    }
    Matrix kern(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            kern(i, j) = kern(j, i) = std::exp(-m.gamma_ * (x.row(i) - x.row(j)).squaredNorm());

    std::vector<double> alpha(static_cast<std::size_t>(n), 0.0);
    std::vector<double> f(static_cast<std::size_t>(n), 0.0);  // decision without bias
    double b = 0.0;
    Rng rng(derive_seed(o.seed, "svm"));
    int passes = 0, iter = 0;
    auto yy = [&](Eigen::Index i) { return static_cast<double>(y[static_cast<std::size_t>(i)]); };
    while (passes < o.maxPasses && iter < o.maxIterations) {
        int changed = 0;
        for (Eigen::Index i = 0; i < n && iter < o.maxIterations; ++i, ++iter) {
            const auto si = static_cast<std::size_t>(i);
            const double ei = f[si] + b - yy(i);
            if (!((yy(i) * ei < -o.tol && alpha[si] < o.c) || (yy(i) * ei > o.tol && alpha[si] > 0))) continue;
            // Second index: largest |Ei - Ej|, random fallback.
            Eigen::Index j = -1;
            double best = -1.0;
            for (Eigen::Index c = 0; c < n; ++c) {
                if (c == i) continue;
                const double gap = std::abs(ei - (f[static_cast<std::size_t>(c)] + b - yy(c)));
                if (gap > best) best = gap, j = c;
            }
            if (best <= 1e-12) {
                j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n - 1)));
                if (j >= i) ++j;
            }
            const auto sj = static_cast<std::size_t>(j);
            const double ej = f[sj] + b - yy(j);
            const double ai = alpha[si], aj = alpha[sj];
            double lo, hi;
            if (yy(i) != yy(j)) {
                lo = std::max(0.0, aj - ai);
                hi = std::min(o.c, o.c + aj - ai);
            } else {
                lo = std::max(0.0, ai + aj - o.c);
                hi = std::min(o.c, ai + aj);
            }
            if (hi - lo < 1e-12) continue;
            const double eta = 2.0 * kern(i, j) - kern(i, i) - kern(j, j);
            if (eta >= -1e-12) continue;
            double ajNew = std::clamp(aj - yy(j) * (ei - ej) / eta, lo, hi);
            if (std::abs(ajNew - aj) < 1e-8) continue;
            const double aiNew = ai + yy(i) * yy(j) * (aj - ajNew);
            const double di = (aiNew - ai) * yy(i), dj = (ajNew - aj) * yy(j);
            const double b1 = b - ei - di * kern(i, i) - dj * kern(i, j);
            const double b2 = b - ej - di * kern(i, j) - dj * kern(j, j);
            alpha[si] = aiNew;
            alpha[sj] = ajNew;
            for (Eigen::Index c = 0; c < n; ++c) f[static_cast<std::size_t>(c)] += di * kern(c, i) + dj * kern(c, j);
            if (aiNew > 0 && aiNew < o.c)
                b = b1;
            else if (ajNew > 0 && ajNew < o.c)
                b = b2;
            else
                b = 0.5 * (b1 + b2);
            ++changed;
        }
        passes = changed == 0 ? passes + 1 : 0;
    }
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < n; ++i)
        if (alpha[static_cast<std::size_t>(i)] > 1e-10) keep.push_back(i);
    m.sv_ = Matrix(static_cast<Eigen::Index>(keep.size()), x.cols());
    for (std::size_t r = 0; r < keep.size(); ++r) {
        m.sv_.row(static_cast<Eigen::Index>(r)) = x.row(keep[r]);
        m.coef_.push_back(alpha[static_cast<std::size_t>(keep[r])] * yy(keep[r]));
    }
    m.bias_ = b;
    return m;
}

double RbfSvm::decision(const RowVector& p) const {
    double s = bias_;
    for (Eigen::Index i = 0; i < sv_.rows(); ++i)
        s += coef_[static_cast<std::size_t>(i)] * std::exp(-gamma_ * (sv_.row(i) - p).squaredNorm());
    return s;
}

RegionClassifier RegionClassifier::fit(const Matrix& points, std::span<const int> labels, const RbfSvm::Options& o) {
    RegionClassifier rc;
    rc.classes_ = std::vector<int>(labels.begin(), labels.end());
    std::sort(rc.classes_.begin(), rc.classes_.end());
    rc.classes_.erase(std::unique(rc.classes_.begin(), rc.classes_.end()), rc.classes_.end());
    if (rc.classes_.size() < 2) return rc;
    for (std::size_t c = 0; c < rc.classes_.size(); ++c) {
        std::vector<int> y;
        for (int l : labels) y.push_back(l == rc.classes_[c] ? 1 : -1);
        auto opt = o;
        opt.seed = derive_seed(o.seed, c);
        rc.machines_.push_back(RbfSvm::fit(points, y, opt));
        if (rc.classes_.size() == 2) break;  // one machine separates two classes
    }
    return rc;
}

int RegionClassifier::predict(const RowVector& p) const {
    require(!classes_.empty(), "region classifier is empty");
    if (classes_.size() == 1) return classes_[0];
    if (classes_.size() == 2) return machines_[0].decision(p) >= 0.0 ? classes_[0] : classes_[1];
    std::size_t best = 0;
    double top = machines_[0].decision(p);
    for (std::size_t c = 1; c < machines_.size(); ++c) {
        const double d = machines_[c].decision(p);
        if (d > top) top = d, best = c;
    }
    return classes_[best];
}

double intra_inter_ratio(const Matrix& x, std::span<const int> labels) {
    require(static_cast<Eigen::Index>(labels.size()) == x.rows(), "label count mismatch");
    double intra = 0.0, inter = 0.0;
    long ni = 0, ne = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j) {
            const double d = (x.row(i) - x.row(j)).norm();
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)])
                intra += d, ++ni;
            else
                inter += d, ++ne;
        }
    require(ni > 0 && ne > 0, "ratio needs two classes with at least one pair");
    return (intra / static_cast<double>(ni)) / (inter / static_cast<double>(ne));
}

double RepresentationMap::distance_ratio() const { return intra_inter_ratio(points, labels); }

RepresentationMap representation_map(const Matrix& reprs, std::span<const int> labels,
                                     const RepresentationMapOptions& o) {
    require(static_cast<Eigen::Index>(labels.size()) == reprs.rows(), "label count mismatch");
    std::set<int> classes(labels.begin(), labels.end());
    require(reprs.rows() >= static_cast<Eigen::Index>(classes.size()) && !classes.empty(),
            "fewer points than classes");
    RepresentationMap m;
    m.labels.assign(labels.begin(), labels.end());
    if (o.projector) {
        m.points = o.projector(reprs);
        require(m.points.rows() == reprs.rows() && m.points.cols() == 2, "projector must return N x 2");
    } else {
        m.pca = fit_pca(reprs, 2);
        m.points = m.pca.project(reprs);
    }
    m.regions = RegionClassifier::fit(m.points, labels, o.svm);

    const RowVector lo = m.points.colwise().minCoeff(), hi = m.points.colwise().maxCoeff();
    const RowVector pad = (hi - lo) * 0.05;
    const int g = std::max(2, o.gridSize);
    for (int a = 0; a < g; ++a)
        for (int b = 0; b < g; ++b) {
            RowVector p(2);
            p[0] = lo[0] - pad[0] + (hi[0] - lo[0] + 2 * pad[0]) * a / (g - 1);
            p[1] = lo[1] - pad[1] + (hi[1] - lo[1] + 2 * pad[1]) * b / (g - 1);
            m.grid.push_back({p[0], p[1], m.regions.predict(p)});
        }
    return m;
}

nlohmann::json RepresentationMap::to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (Eigen::Index i = 0; i < points.rows(); ++i)
        pts.push_back({points(i, 0), points(i, 1), labels[static_cast<std::size_t>(i)]});
    nlohmann::json grid_ = nlohmann::json::array();
    for (const auto& c : grid) grid_.push_back({c.x, c.y, c.label});
    return {{"points", pts}, {"grid", grid_}, {"distanceRatio", distance_ratio()}};
}

std::string RepresentationMap::grid_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "x,y,label\n";
    for (const auto& c : grid) os << c.x << ',' << c.y << ',' << c.label << '\n';
    return os.str();
}

}  // namespace synghost::analysis
