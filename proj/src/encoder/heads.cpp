#include "synghost/encoder/heads.hpp"

#include <cmath>

#include "synghost/common/errors.hpp"
#include "synghost/common/rng.hpp"

namespace synghost::encoder {

namespace {

Matrix uniform(Rng& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
    round_to_storage(m);
    return m;
}

Matrix add_bias(Matrix m, const Matrix& b) {
    m.rowwise() += b.row(0);
    return m;
}

}  // namespace

std::string role_name(HeadRole role) {
    switch (role) {
        case HeadRole::TaskClassifier: return "taskClassifier";
        case HeadRole::SyntaxHead: return "syntaxHead";
        case HeadRole::PoisonHead: return "poisonHead";
        case HeadRole::ProbeHead: return "probeHead";
    }
    return "?";
}

std::string arch_name(HeadArch arch) {
    switch (arch) {
        case HeadArch::Linear: return "single-layer";
        case HeadArch::TwoLayer: return "two-layer";
        case HeadArch::Recurrent: return "recurrent-head";
    }
    return "?";
}

HeadArch parse_arch(const std::string& name) {
    if (name == "single-layer" || name == "linear") return HeadArch::Linear;
    if (name == "two-layer") return HeadArch::TwoLayer;
    if (name == "recurrent-head" || name == "recurrent") return HeadArch::Recurrent;
    throw ValidationError("unknown head kind: " + name);
}

NamedParams HeadState::named(const std::string& prefix) {
    NamedParams out;
    for (auto& [name, m] : weights) out.emplace_back(prefix + name, &m);
    return out;
}

NamedGrads head_grads(const HeadGrad& grad, const std::string& prefix) {
    NamedGrads out;
    for (const auto& [name, m] : grad.weights) out.emplace_back(prefix + name, &m);
    return out;
}

nlohmann::json head_to_json(const HeadState& head) {
    nlohmann::json w = nlohmann::json::object();
    for (const auto& [name, m] : head.weights) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
        w[name] = rows;
    }
    return {{"role", role_name(head.role)}, {"arch", arch_name(head.arch)}, {"inDim", head.inDim},
            {"hidden", head.hidden}, {"numClasses", head.numClasses}, {"weights", w}};
}

HeadState head_from_json(const nlohmann::json& j) {
    HeadState h;
    const auto role = j.at("role").get<std::string>();
    bool known = false;
    for (auto r : {HeadRole::TaskClassifier, HeadRole::SyntaxHead, HeadRole::PoisonHead, HeadRole::ProbeHead})
        if (role_name(r) == role) h.role = r, known = true;
    if (!known) throw ValidationError("unknown head role: " + role);
    h.arch = parse_arch(j.at("arch").get<std::string>());
    h.inDim = j.at("inDim").get<int>();
    h.hidden = j.at("hidden").get<int>();
    h.numClasses = j.at("numClasses").get<int>();
    for (const auto& [name, rows] : j.at("weights").items()) {
        const auto n = static_cast<Eigen::Index>(rows.size());
        const auto c = n ? static_cast<Eigen::Index>(rows[0].size()) : 0;
        Matrix m(n, c);
        for (Eigen::Index r = 0; r < n; ++r) {
            require(static_cast<Eigen::Index>(rows[r].size()) == c, "ragged head tensor " + name);
            for (Eigen::Index k = 0; k < c; ++k) m(r, k) = rows[r][k].get<double>();
        }
        h.weights[name] = std::move(m);
    }
    return h;
}

HeadState init_head(HeadRole role, HeadArch arch, int inDim, int numClasses, std::uint64_t seed, int hidden) {
    require(inDim >= 1, "head input dim must be positive");
    require(numClasses >= 2 || (role == HeadRole::SyntaxHead && numClasses >= 1), "head needs at least 2 classes");
    if (role == HeadRole::PoisonHead) require(numClasses == 2, "poison head is binary");
    HeadState h;
    h.role = role;
    h.arch = arch;
    h.inDim = inDim;
    h.numClasses = numClasses;
    Rng rng(derive_seed(seed, "head-init"));
    const double s = 1.0 / std::sqrt(static_cast<double>(inDim));
    if (arch == HeadArch::Linear) {
        h.weights["w1"] = uniform(rng, inDim, numClasses, s);
        h.weights["b1"] = Matrix::Zero(1, numClasses);
        return h;
    }
    require(hidden >= 1, "head hidden size must be positive");
    h.hidden = hidden;
    const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
    h.weights["w1"] = uniform(rng, inDim, hidden, s);
    h.weights["b1"] = Matrix::Zero(1, hidden);
    h.weights["w2"] = uniform(rng, hidden, numClasses, sh);
    h.weights["b2"] = Matrix::Zero(1, numClasses);
    if (arch == HeadArch::Recurrent) h.weights["wr"] = uniform(rng, hidden, hidden, sh);
    return h;
}

Matrix head_forward(const HeadState& head, const Matrix& tokens, const Batch& batch, const EncoderConfig& config,
                    HeadCache* cache) {
    require(tokens.cols() == head.inDim, "head input width mismatch");
    require(tokens.rows() == batch.rows(), "head token count mismatch");
    const auto& W = head.weights;
    if (head.arch != HeadArch::Recurrent) {
        Matrix x = pool(config, tokens, batch);
        if (cache) {
            cache->batch = batch;
            cache->poolConfig = config;
        }
        Matrix logits;
        if (head.arch == HeadArch::Linear) {
            logits = add_bias(x * W.at("w1"), W.at("b1"));
        } else {
            Matrix z = add_bias(x * W.at("w1"), W.at("b1")).array().tanh();
            logits = add_bias(z * W.at("w2"), W.at("b2"));
            if (cache) cache->z = std::move(z);
        }
        if (cache) cache->x = std::move(x);
        return logits;
    }
    Matrix pre = add_bias(tokens * W.at("w1"), W.at("b1"));
    Matrix z(tokens.rows(), head.hidden);
    Matrix last(batch.size(), head.hidden);
    const Matrix& wr = W.at("wr");
    for (int b = 0; b < batch.size(); ++b) {
        RowVector h = RowVector::Zero(head.hidden);
        for (int t = 0; t < batch.length(b); ++t) {
            const int r = batch.offsets[b] + t;
            h = (pre.row(r) + h * wr).array().tanh();
            z.row(r) = h;
        }
        last.row(b) = h;
    }
    if (cache) {
        cache->batch = batch;
        cache->x = tokens;
        cache->z = z;
    }
    return add_bias(last * W.at("w2"), W.at("b2"));
}

Matrix head_forward_features(const HeadState& head, const Matrix& features, HeadCache* cache) {
    require(head.arch != HeadArch::Recurrent, "recurrent head needs token sequences");
    Batch b;
    b.offsets.resize(static_cast<std::size_t>(features.rows()) + 1);
    for (Eigen::Index i = 0; i <= features.rows(); ++i) b.offsets[static_cast<std::size_t>(i)] = static_cast<int>(i);
    b.ids.assign(static_cast<std::size_t>(features.rows()), 0);
    EncoderConfig c;
    c.reprMode = ReprMode::Cls;
    c.reprPosition = 0;
    return head_forward(head, features, b, c, cache);
}

HeadGrad head_backward(const HeadState& head, const HeadCache& cache, const Matrix& dLogits) {
    const auto& W = head.weights;
    HeadGrad g;
    const Batch& batch = cache.batch;
    if (head.arch == HeadArch::Linear) {
        g.weights["w1"] = cache.x.transpose() * dLogits;
        g.weights["b1"] = dLogits.colwise().sum();
        g.dTokens = unpool(cache.poolConfig, dLogits * W.at("w1").transpose(), batch);
        return g;
    }
    if (head.arch == HeadArch::TwoLayer) {
        g.weights["w2"] = cache.z.transpose() * dLogits;
        g.weights["b2"] = dLogits.colwise().sum();
        Matrix dz = (dLogits * W.at("w2").transpose()).array() * (1.0 - cache.z.array().square());
        g.weights["w1"] = cache.x.transpose() * dz;
        g.weights["b1"] = dz.colwise().sum();
        g.dTokens = unpool(cache.poolConfig, dz * W.at("w1").transpose(), batch);
        return g;
    }
    const Matrix& wr = W.at("wr");
    Matrix last(batch.size(), head.hidden);
    for (int b = 0; b < batch.size(); ++b) last.row(b) = cache.z.row(batch.offsets[b + 1] - 1);
    g.weights["w2"] = last.transpose() * dLogits;
    g.weights["b2"] = dLogits.colwise().sum();
    Matrix dLast = dLogits * W.at("w2").transpose();
    Matrix dPre = Matrix::Zero(cache.z.rows(), head.hidden);
    Matrix dWr = Matrix::Zero(head.hidden, head.hidden);
    for (int b = 0; b < batch.size(); ++b) {
        RowVector dh = dLast.row(b);
        for (int t = batch.length(b) - 1; t >= 0; --t) {
            const int r = batch.offsets[b] + t;
            RowVector da = dh.array() * (1.0 - cache.z.row(r).array().square());
            dPre.row(r) = da;
            if (t > 0) {
                dWr.noalias() += cache.z.row(r - 1).transpose() * da;
                dh = da * wr.transpose();
            }
        }
    }
    g.weights["wr"] = dWr;
    g.weights["w1"] = cache.x.transpose() * dPre;
    g.weights["b1"] = dPre.colwise().sum();
    g.dTokens = dPre * W.at("w1").transpose();
    return g;
}

Matrix softmax(const Matrix& logits) {
    Matrix p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dLogits) {
    require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "label count mismatch");
    require(!labels.empty(), "cross-entropy on an empty batch");
    const double inv = 1.0 / static_cast<double>(labels.size());
    double loss = 0.0;
    Matrix p = softmax(logits);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= logits.cols()) throw ValidationError("label outside head range");
        const Eigen::Index r = static_cast<Eigen::Index>(i);
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        loss += lse - logits(r, y);
        p(r, y) -= 1.0;
    }
    if (dLogits) *dLogits = p * inv;
    return loss * inv;
}

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c)
            if (logits(r, c) > logits(r, best)) best = c;
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

}  // namespace synghost::encoder
