#include "synghost/encoder/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "synghost/common/errors.hpp"
#include "synghost/common/hash.hpp"
#include "synghost/common/rng.hpp"
#include "synghost/corpus/grammar.hpp"

namespace synghost::encoder {

namespace {

constexpr double kLnEps = 1e-5;

struct NormCache {
    Matrix xhat;
    Eigen::VectorXd rstd;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
    const Eigen::Index d = x.cols();
    Eigen::VectorXd mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    Eigen::VectorXd var = centered.rowwise().squaredNorm() / static_cast<double>(d);
    Eigen::VectorXd rstd = (var.array() + kLnEps).rsqrt();
    Matrix xhat = centered.array().colwise() * rstd.array();
    Matrix y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache, Matrix* dGain,
                           Matrix* dBias) {
    if (dGain) *dGain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    if (dBias) *dBias += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    const double d = static_cast<double>(dy.cols());
    Eigen::VectorXd meanDx = dxhat.rowwise().sum() / d;
    Eigen::VectorXd meanDxX = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
    Matrix dx = dxhat.colwise() - meanDx;
    dx -= (cache.xhat.array().colwise() * meanDxX.array()).matrix();
    return dx.array().colwise() * cache.rstd.array();
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }
double gelu_grad(double u) {
    return 0.5 * (1.0 + std::erf(u * M_SQRT1_2)) + u * std::exp(-0.5 * u * u) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
}

void softmax_rows(Matrix& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
    }
}

Matrix uniform_matrix(Rng& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
    round_to_storage(m);
    return m;
}

}  // namespace

struct LayerTrace {
    NormCache ln1, ln2;
    Matrix h, q, k, v, attnConcat;
    std::vector<std::vector<Matrix>> probs;  // [b][head]
    Matrix h2, u, a;
};

struct Trace {
    Batch batch;
    std::vector<LayerTrace> layers;
    NormCache lnf;
};

TraceHandle::TraceHandle() : trace_(std::make_unique<Trace>()) {}
TraceHandle::~TraceHandle() = default;
TraceHandle::TraceHandle(TraceHandle&&) noexcept = default;
TraceHandle& TraceHandle::operator=(TraceHandle&&) noexcept = default;

void EncoderConfig::validate() const {
    require(numLayers >= 1, "numLayers must be >= 1");
    require(hiddenDim >= 1 && numHeads >= 1, "hiddenDim and numHeads must be positive");
    require(hiddenDim % numHeads == 0, "hiddenDim divisible by numHeads");
    require(ffnDim >= 1, "ffnDim must be >= 1");
    require(vocabSize >= 4, "vocabSize must cover the special tokens");
    require(maxLen >= 1, "maxLen must be >= 1");
    for (int l : syntaxAwareLayers) require(l >= 1 && l <= numLayers, "syntaxAwareLayers must lie in 1..numLayers");
    require(reprPosition >= 0 && reprPosition < maxLen, "reprPosition must be < maxLen");
}

EncoderConfig desk_config() {
    EncoderConfig c;
    c.vocabSize = corpus::Vocabulary::desk().size();
    return c;
}

std::vector<std::pair<std::string, Matrix*>> Params::named() {
    std::vector<std::pair<std::string, Matrix*>> out{{"tokEmb", &tokEmb}, {"posEmb", &posEmb}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& L = layers[i];
        const std::string p = "layers." + std::to_string(i + 1) + ".";
        for (auto [name, m] : std::initializer_list<std::pair<const char*, Matrix*>>{
                 {"ln1Gain", &L.ln1Gain}, {"ln1Bias", &L.ln1Bias}, {"wq", &L.wq},           {"bq", &L.bq},
                 {"wk", &L.wk},           {"bk", &L.bk},           {"wv", &L.wv},           {"bv", &L.bv},
                 {"wo", &L.wo},           {"bo", &L.bo},           {"ln2Gain", &L.ln2Gain}, {"ln2Bias", &L.ln2Bias},
                 {"w1", &L.w1},           {"b1", &L.b1},           {"w2", &L.w2},           {"b2", &L.b2}})
            out.emplace_back(p + name, m);
    }
    out.emplace_back("lnfGain", &lnfGain);
    out.emplace_back("lnfBias", &lnfBias);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> Params::named() const {
    auto mut = const_cast<Params*>(this)->named();
    std::vector<std::pair<std::string, const Matrix*>> out;
    out.reserve(mut.size());
    for (auto& [n, m] : mut) out.emplace_back(n, m);
    return out;
}

Params Params::zeros_like() const {
    Params z = *this;
    for (auto& [name, m] : z.named()) m->setZero();
    return z;
}

int layer_of(const std::string& name, int numLayers) {
    if (name.rfind("layers.", 0) == 0) return std::stoi(name.substr(7));
    if (name.rfind("lnf", 0) == 0) return numLayers + 1;
    return 0;
}

std::vector<int> EncoderState::pruned_neurons(int layer) const {
    std::vector<int> out;
    if (ffnMask.empty()) return out;
    const RowVector& m = ffnMask[static_cast<std::size_t>(layer - 1)];
    for (Eigen::Index i = 0; i < m.size(); ++i)
        if (m[i] == 0.0) out.push_back(static_cast<int>(i));
    return out;
}

EncoderState init_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderState s;
    s.config = config;
    s.rngSeed = seed;
    Rng rng(derive_seed(seed, "encoder-init"));
    const int d = config.hiddenDim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    auto& P = s.params;
    P.tokEmb = uniform_matrix(rng, config.vocabSize, d, scale);
    P.posEmb = uniform_matrix(rng, config.maxLen, d, scale);
    for (int l = 0; l < config.numLayers; ++l) {
        LayerParams L;
        L.ln1Gain = Matrix::Ones(1, d);
        L.ln1Bias = Matrix::Zero(1, d);
        L.wq = uniform_matrix(rng, d, d, scale);
        L.bq = Matrix::Zero(1, d);
        L.wk = uniform_matrix(rng, d, d, scale);
        L.bk = Matrix::Zero(1, d);
        L.wv = uniform_matrix(rng, d, d, scale);
        L.bv = Matrix::Zero(1, d);
        L.wo = uniform_matrix(rng, d, d, scale);
        L.bo = Matrix::Zero(1, d);
        L.ln2Gain = Matrix::Ones(1, d);
        L.ln2Bias = Matrix::Zero(1, d);
        L.w1 = uniform_matrix(rng, d, config.ffnDim, scale);
        L.b1 = Matrix::Zero(1, config.ffnDim);
        L.w2 = uniform_matrix(rng, config.ffnDim, d, scale);
        L.b2 = Matrix::Zero(1, d);
        P.layers.push_back(std::move(L));
    }
    P.lnfGain = Matrix::Ones(1, d);
    P.lnfBias = Matrix::Zero(1, d);
    return s;
}

EncoderState clone_sentinel(const EncoderState& model) {
    EncoderState c = model;
    c.frozen = true;
    return c;
}

void Batch::add(std::span<const int> sequence) {
    require(!sequence.empty(), "empty sequence in batch");
    ids.insert(ids.end(), sequence.begin(), sequence.end());
    offsets.push_back(static_cast<int>(ids.size()));
}

std::vector<int> with_cls(std::span<const int> tokens, int maxLen) {
    if (static_cast<int>(tokens.size()) + 1 > maxLen) throw ValidationError("sequence exceeds maxLen");
    std::vector<int> out;
    out.reserve(tokens.size() + 1);
    out.push_back(corpus::Vocabulary::kCls);
    out.insert(out.end(), tokens.begin(), tokens.end());
    return out;
}

Batch make_batch(std::span<const std::vector<int>> sequences) {
    Batch b;
    for (const auto& s : sequences) b.add(s);
    return b;
}

ForwardResult forward(const EncoderState& model, const Batch& batch, const ForwardOptions& options,
                      TraceHandle* traceHandle, bool keepFfnPreActivation) {
    const auto& cfg = model.config;
    const auto& P = model.params;
    const int d = cfg.hiddenDim;
    const int H = cfg.numHeads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    require(batch.size() >= 1, "empty batch");
    for (int b = 0; b < batch.size(); ++b)
        if (batch.length(b) > cfg.maxLen) throw ValidationError("sequence exceeds maxLen");
    for (int id : batch.ids) require(id >= 0 && id < cfg.vocabSize, "token id out of range");
    for (int l : options.tapLayers) require(l >= 1 && l <= cfg.numLayers, "tap layer out of range");

    Trace* trace = traceHandle ? traceHandle->get() : nullptr;
    if (trace) {
        trace->batch = batch;
        trace->layers.assign(static_cast<std::size_t>(cfg.numLayers), LayerTrace{});
    }

    const int N = batch.rows();
    Matrix x(N, d);
    for (int b = 0; b < batch.size(); ++b)
        for (int t = 0; t < batch.length(b); ++t) {
            const int r = batch.offsets[b] + t;
            x.row(r) = P.tokEmb.row(batch.ids[r]) + P.posEmb.row(t);
        }

    ForwardResult res;
    res.batch = batch;
    for (int l = 0; l < cfg.numLayers; ++l) {
        const auto& L = P.layers[static_cast<std::size_t>(l)];
        const int layerNo = l + 1;
        LayerTrace local;
        LayerTrace& lt = trace ? trace->layers[static_cast<std::size_t>(l)] : local;

        lt.h = layer_norm(x, L.ln1Gain, L.ln1Bias, &lt.ln1);
        lt.q = (lt.h * L.wq).rowwise() + L.bq.row(0);
        lt.k = (lt.h * L.wk).rowwise() + L.bk.row(0);
        lt.v = (lt.h * L.wv).rowwise() + L.bv.row(0);
        lt.attnConcat.resize(N, d);
        const bool keep = options.keepAttention;
        if (trace) lt.probs.assign(static_cast<std::size_t>(batch.size()), {});
        std::vector<std::vector<Matrix>> attnMaps;
        for (int b = 0; b < batch.size(); ++b) {
            const int off = batch.offsets[b];
            const int T = batch.length(b);
            std::vector<Matrix> heads;
            for (int hh = 0; hh < H; ++hh) {
                Matrix s = lt.q.block(off, hh * dh, T, dh) * lt.k.block(off, hh * dh, T, dh).transpose() * scale;
                softmax_rows(s);
                lt.attnConcat.block(off, hh * dh, T, dh) = s * lt.v.block(off, hh * dh, T, dh);
                if (trace || keep) heads.push_back(std::move(s));
            }
            if (keep) attnMaps.push_back(heads);
            if (trace) lt.probs[static_cast<std::size_t>(b)] = std::move(heads);
        }
        if (keep) res.attention[layerNo] = std::move(attnMaps);
        x += (lt.attnConcat * L.wo).rowwise() + L.bo.row(0);

        lt.h2 = layer_norm(x, L.ln2Gain, L.ln2Bias, &lt.ln2);
        lt.u = (lt.h2 * L.w1).rowwise() + L.b1.row(0);
        lt.a = lt.u.unaryExpr([](double u) { return gelu(u); });
        if (!model.ffnMask.empty()) lt.a = lt.a.array().rowwise() * model.ffnMask[static_cast<std::size_t>(l)].array();
        if (keepFfnPreActivation) res.ffnPreActivation[layerNo] = lt.u;
        x += (lt.a * L.w2).rowwise() + L.b2.row(0);

        if (options.tapLayers.contains(layerNo)) res.taps[layerNo] = x;
    }
    res.finalRepr = layer_norm(x, P.lnfGain, P.lnfBias, trace ? &trace->lnf : nullptr);
    return res;
}

Params backward(const EncoderState& model, const TraceHandle& handle, const Matrix& dFinal,
                const std::map<int, Matrix>& dTaps, const BackwardOptions& options) {
    const Trace* trace = handle.get();
    require(trace && !trace->layers.empty(), "backward needs a forward trace");
    const auto& cfg = model.config;
    const auto& P = model.params;
    const Batch& batch = trace->batch;
    const int N = batch.rows();
    const int d = cfg.hiddenDim;
    const int H = cfg.numHeads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int lowest = options.lowestTrainableLayer;

    Params g = P.zeros_like();
    Matrix dx = Matrix::Zero(N, d);
    if (dFinal.size() > 0) {
        require(dFinal.rows() == N && dFinal.cols() == d, "dFinal shape mismatch");
        if (lowest <= cfg.numLayers + 1)
            dx = layer_norm_backward(dFinal, P.lnfGain, trace->lnf, &g.lnfGain, &g.lnfBias);
    }

    for (int l = cfg.numLayers - 1; l >= 0; --l) {
        const int layerNo = l + 1;
        if (layerNo < lowest) break;
        if (auto it = dTaps.find(layerNo); it != dTaps.end()) {
            require(it->second.rows() == N && it->second.cols() == d, "dTap shape mismatch");
            dx += it->second;
        }
        const auto& L = P.layers[static_cast<std::size_t>(l)];
        auto& G = g.layers[static_cast<std::size_t>(l)];
        const LayerTrace& lt = trace->layers[static_cast<std::size_t>(l)];

        // Feed-forward block.
        G.w2.noalias() += lt.a.transpose() * dx;
        G.b2 += dx.colwise().sum();
        Matrix da = dx * L.w2.transpose();
        if (!model.ffnMask.empty()) da = da.array().rowwise() * model.ffnMask[static_cast<std::size_t>(l)].array();
        Matrix du = da.array() * lt.u.unaryExpr([](double u) { return gelu_grad(u); }).array();
        G.w1.noalias() += lt.h2.transpose() * du;
        G.b1 += du.colwise().sum();
        Matrix dh2 = du * L.w1.transpose();
        dx += layer_norm_backward(dh2, L.ln2Gain, lt.ln2, &G.ln2Gain, &G.ln2Bias);

        // Attention block.
        G.wo.noalias() += lt.attnConcat.transpose() * dx;
        G.bo += dx.colwise().sum();
        Matrix dconcat = dx * L.wo.transpose();
        Matrix dq = Matrix::Zero(N, d), dk = Matrix::Zero(N, d), dv = Matrix::Zero(N, d);
        for (int b = 0; b < batch.size(); ++b) {
            const int off = batch.offsets[b];
            const int T = batch.length(b);
            for (int hh = 0; hh < H; ++hh) {
                const Matrix& p = lt.probs[static_cast<std::size_t>(b)][static_cast<std::size_t>(hh)];
                auto dO = dconcat.block(off, hh * dh, T, dh);
                auto vb = lt.v.block(off, hh * dh, T, dh);
                Matrix dp = dO * vb.transpose();
                dv.block(off, hh * dh, T, dh).noalias() += p.transpose() * dO;
                Eigen::VectorXd rowDot = (dp.array() * p.array()).rowwise().sum();
                Matrix ds = (p.array() * (dp.colwise() - rowDot).array()).matrix() * scale;
                dq.block(off, hh * dh, T, dh).noalias() += ds * lt.k.block(off, hh * dh, T, dh);
                dk.block(off, hh * dh, T, dh).noalias() += ds.transpose() * lt.q.block(off, hh * dh, T, dh);
            }
        }
        G.wq.noalias() += lt.h.transpose() * dq;
        G.bq += dq.colwise().sum();
        G.wk.noalias() += lt.h.transpose() * dk;
        G.bk += dk.colwise().sum();
        G.wv.noalias() += lt.h.transpose() * dv;
        G.bv += dv.colwise().sum();
        Matrix dh = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
        dx += layer_norm_backward(dh, L.ln1Gain, lt.ln1, &G.ln1Gain, &G.ln1Bias);
    }

    if (lowest == 0) {
        for (int b = 0; b < batch.size(); ++b)
            for (int t = 0; t < batch.length(b); ++t) {
                const int r = batch.offsets[b] + t;
                g.tokEmb.row(batch.ids[r]) += dx.row(r);
                g.posEmb.row(t) += dx.row(r);
            }
    }
    return g;
}

Matrix pool(const EncoderConfig& config, const Matrix& tokens, const Batch& batch) {
    Matrix out(batch.size(), tokens.cols());
    for (int b = 0; b < batch.size(); ++b) {
        if (config.reprMode == ReprMode::Mean) {
            out.row(b) = tokens.middleRows(batch.offsets[b], batch.length(b)).colwise().mean();
        } else {
            require(config.reprPosition < batch.length(b), "sequence shorter than reprPosition");
            out.row(b) = tokens.row(batch.offsets[b] + config.reprPosition);
        }
    }
    return out;
}

Matrix unpool(const EncoderConfig& config, const Matrix& dPooled, const Batch& batch) {
    Matrix out = Matrix::Zero(batch.rows(), dPooled.cols());
    for (int b = 0; b < batch.size(); ++b) {
        if (config.reprMode == ReprMode::Mean) {
            const double inv = 1.0 / batch.length(b);
            for (int t = 0; t < batch.length(b); ++t) out.row(batch.offsets[b] + t) = dPooled.row(b) * inv;
        } else {
            out.row(batch.offsets[b] + config.reprPosition) = dPooled.row(b);
        }
    }
    return out;
}

Matrix representation(const EncoderState& model, const Batch& batch) {
    auto res = forward(model, batch);
    return pool(model.config, res.finalRepr, batch);
}

namespace {

nlohmann::json config_json(const EncoderConfig& c) {
    return {{"numLayers", c.numLayers},
            {"hiddenDim", c.hiddenDim},
            {"numHeads", c.numHeads},
            {"ffnDim", c.ffnDim},
            {"vocabSize", c.vocabSize},
            {"maxLen", c.maxLen},
            {"syntaxAwareLayers", c.syntaxAwareLayers},
            {"reprPosition", c.reprPosition},
            {"reprMode", c.reprMode == ReprMode::Cls ? "cls" : "mean"}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.numLayers = j.at("numLayers");
    c.hiddenDim = j.at("hiddenDim");
    c.numHeads = j.at("numHeads");
    c.ffnDim = j.at("ffnDim");
    c.vocabSize = j.at("vocabSize");
    c.maxLen = j.at("maxLen");
    c.syntaxAwareLayers = j.at("syntaxAwareLayers").get<std::set<int>>();
    c.reprPosition = j.at("reprPosition");
    c.reprMode = j.at("reprMode") == "mean" ? ReprMode::Mean : ReprMode::Cls;
    return c;
}

void append_f32(std::string& out, const Matrix& m) {
    static_assert(std::endian::native == std::endian::little, "little-endian host expected");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const float f = static_cast<float>(m.data()[i]);
        char buf[4];
        std::memcpy(buf, &f, 4);
        out.append(buf, 4);
    }
}

std::string tensor_bytes(const EncoderState& model) {
    std::string out;
    for (const auto& [name, m] : model.params.named()) append_f32(out, *m);
    for (const auto& mask : model.ffnMask) append_f32(out, mask);
    return out;
}

nlohmann::json header_json(const EncoderState& model) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& [name, m] : model.params.named())
        manifest.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    return {{"format", 1},
            {"config", config_json(model.config)},
            {"rngSeed", model.rngSeed},
            {"frozen", model.frozen},
            {"tensors", manifest},
            {"ffnMaskLayers", model.ffnMask.size()}};
}

}  // namespace

void save_checkpoint(const EncoderState& model, const std::filesystem::path& path) {
    const std::string header = header_json(model).dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write("SGCK", 4);
    const std::uint64_t len = header.size();
    char lenBytes[8];
    std::memcpy(lenBytes, &len, 8);
    out.write(lenBytes, 8);
    out << header;
    const std::string body = tensor_bytes(model);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw std::runtime_error("short write on checkpoint " + path.string());
}

EncoderState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SGCK", 4) != 0) throw ValidationError("not a checkpoint: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || len > (1u << 26)) throw ValidationError("corrupt checkpoint header");
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("corrupt checkpoint header");
    }
    EncoderState s = init_encoder(config_from_json(h.at("config")), 0);
    s.rngSeed = h.at("rngSeed");
    s.frozen = h.at("frozen");
    auto read_into = [&](Matrix& m) {
        std::vector<float> buf(static_cast<std::size_t>(m.size()));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (!in) throw ValidationError("truncated checkpoint");
        for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = buf[i];
    };
    auto named = s.params.named();
    const auto& manifest = h.at("tensors");
    if (manifest.size() != named.size()) throw ValidationError("checkpoint tensor manifest mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& t = manifest[i];
        if (t.at("name") != named[i].first || t.at("rows") != named[i].second->rows() ||
            t.at("cols") != named[i].second->cols())
            throw ValidationError("checkpoint tensor manifest mismatch at " + named[i].first);
        read_into(*named[i].second);
    }
    const std::size_t masks = h.at("ffnMaskLayers");
    for (std::size_t l = 0; l < masks; ++l) {
        RowVector m(s.config.ffnDim);
        std::vector<float> buf(static_cast<std::size_t>(m.size()));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (!in) throw ValidationError("truncated checkpoint");
        for (std::size_t i = 0; i < buf.size(); ++i) m[static_cast<Eigen::Index>(i)] = buf[i];
        s.ffnMask.push_back(std::move(m));
    }
    return s;
}

std::string state_hash(const EncoderState& model) {
    return sha256_hex(config_json(model.config).dump() + tensor_bytes(model));
}

}  // namespace synghost::encoder
