#include "synghost/harness/config.hpp"

#include <fstream>

#include "synghost/common/errors.hpp"
#include "synghost/common/hash.hpp"
#include "synghost/common/rng.hpp"

namespace synghost::harness {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() : encoder(encoder::desk_config()) {}

void ExperimentConfig::validate() const {
    encoder.validate();
    weights.validate();
    require(corpus.size >= 10, "corpus.size too small");
    require(corpus.maxClauses >= 1, "corpus.maxClauses must be >= 1");
    require(corpus.numTemplates >= 1 && corpus.numTemplates <= 5, "corpus.numTemplates must be in [1, 5]");
    require(corpus.poisonRate > 0.0 && corpus.poisonRate <= 1.0, "corpus.poisonRate must be in (0, 1]");
    require(corpus.finetuneSize >= 2 && corpus.testSize >= 2, "task splits too small");
    require(corpus.referenceSize >= 10, "corpus.referenceSize too small");
    require(inject.optimizer == "sgd" || inject.optimizer == "adamw", "inject.optimizer must be sgd or adamw");
    require(inject.sclMode == "standard" || inject.sclMode == "negatives-only", "unknown inject.sclMode");
    require(defense.calibrationSize + defense.evalSize <= corpus.testSize, "defense sets exceed the test split");
    require(analysis.geometrySize <= corpus.testSize && analysis.groupSize <= corpus.testSize,
            "analysis sets exceed the test split");
    require(gamma >= 0.0 && gamma <= 1.0 && beta >= 0.0 && beta <= 1.0, "gamma and beta must be in [0, 1]");
    (void)this->task();
    finetune_spec().validate(encoder);
}

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["outputDir"] = outputDir;
    j["corpus"] = {{"grammarSeed", corpus.grammarSeed}, {"size", corpus.size},
                   {"maxClauses", corpus.maxClauses}, {"numTemplates", corpus.numTemplates},
                   {"poisonRate", corpus.poisonRate}, {"K", corpus.K},
                   {"referenceSize", corpus.referenceSize}, {"task", corpus.task},
                   {"finetuneSize", corpus.finetuneSize}, {"testSize", corpus.testSize},
                   {"collusionTestSize", corpus.collusionTestSize}};
    j["encoder"] = {{"numLayers", encoder.numLayers}, {"hiddenDim", encoder.hiddenDim},
                    {"numHeads", encoder.numHeads}, {"ffnDim", encoder.ffnDim},
                    {"maxLen", encoder.maxLen}, {"syntaxAwareLayers", encoder.syntaxAwareLayers},
                    {"reprMode", encoder.reprMode == encoder::ReprMode::Cls ? "cls" : "mean"}};
    j["pretrain"] = {{"epochs", pretrain.epochs}, {"batchSize", pretrain.batchSize},
                     {"lr", pretrain.lr}, {"maskRate", pretrain.maskRate}};
    j["weights"] = {{"lambdaC", weights.lambdaC}, {"lambdaP", weights.lambdaP},
                    {"lambdaA", weights.lambdaA}, {"k", weights.k}};
    j["inject"] = {{"epochs", inject.epochs}, {"batchSize", inject.batchSize},
                   {"optimizer", inject.optimizer}, {"lr", inject.lr},
                   {"momentum", inject.momentum}, {"weightDecay", inject.weightDecay},
                   {"sclMode", inject.sclMode}};
    j["finetune"] = {{"freezeBelowLayer", finetune.freezeBelowLayer ? json(*finetune.freezeBelowLayer) : json()},
                     {"head", finetune.head}, {"headHidden", finetune.headHidden},
                     {"epochs", finetune.epochs}, {"batchSize", finetune.batchSize},
                     {"lr", finetune.lr}, {"weightDecay", finetune.weightDecay}};
    j["defense"] = {{"numPerturbations", defense.numPerturbations}, {"fraction", defense.fraction},
                    {"percentile", defense.percentile}, {"fixedThreshold", defense.fixedThreshold},
                    {"calibrationSize", defense.calibrationSize}, {"evalSize", defense.evalSize},
                    {"onionMaxRemoval", defense.onionMaxRemoval}, {"pruneFraction", defense.pruneFraction},
                    {"rareTrigger", defense.rareTrigger}};
    j["metrics"] = {{"gamma", gamma}, {"beta", beta}};
    j["analysis"] = {{"kernelWidth", analysis.kernelWidth}, {"groupSize", analysis.groupSize},
                     {"geometrySize", analysis.geometrySize}, {"probeTrainSize", analysis.probeTrainSize},
                     {"probeEvalSize", analysis.probeEvalSize}, {"attentionSamples", analysis.attentionSamples}};
    return j;
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config field '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& j, const json& reference, const std::string& where) {
    if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!reference.contains(k)) throw ValidationError("unknown config key: " + where + k);
        if (reference.at(k).is_object()) reject_unknown(v, reference.at(k), where + k + ".");
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    reject_unknown(j, c.to_json(), "");
    read(j, "seed", c.seed);
    read(j, "outputDir", c.outputDir);
    const json none = json::object();
    const json& co = j.contains("corpus") ? j["corpus"] : none;
    read(co, "grammarSeed", c.corpus.grammarSeed);
    read(co, "size", c.corpus.size);
    read(co, "maxClauses", c.corpus.maxClauses);
    read(co, "numTemplates", c.corpus.numTemplates);
    read(co, "poisonRate", c.corpus.poisonRate);
    read(co, "K", c.corpus.K);
    read(co, "referenceSize", c.corpus.referenceSize);
    read(co, "task", c.corpus.task);
    read(co, "finetuneSize", c.corpus.finetuneSize);
    read(co, "testSize", c.corpus.testSize);
    read(co, "collusionTestSize", c.corpus.collusionTestSize);
    const json& en = j.contains("encoder") ? j["encoder"] : none;
    read(en, "numLayers", c.encoder.numLayers);
    read(en, "hiddenDim", c.encoder.hiddenDim);
    read(en, "numHeads", c.encoder.numHeads);
    read(en, "ffnDim", c.encoder.ffnDim);
    read(en, "maxLen", c.encoder.maxLen);
    read(en, "syntaxAwareLayers", c.encoder.syntaxAwareLayers);
    if (en.contains("reprMode")) {
        const auto m = en["reprMode"].get<std::string>();
        require(m == "cls" || m == "mean", "encoder.reprMode must be cls or mean");
        c.encoder.reprMode = m == "cls" ? encoder::ReprMode::Cls : encoder::ReprMode::Mean;
    }
    const json& pt = j.contains("pretrain") ? j["pretrain"] : none;
    read(pt, "epochs", c.pretrain.epochs);
    read(pt, "batchSize", c.pretrain.batchSize);
    read(pt, "lr", c.pretrain.lr);
    read(pt, "maskRate", c.pretrain.maskRate);
    const json& w = j.contains("weights") ? j["weights"] : none;
    read(w, "lambdaC", c.weights.lambdaC);
    read(w, "lambdaP", c.weights.lambdaP);
    read(w, "lambdaA", c.weights.lambdaA);
    read(w, "k", c.weights.k);
    const json& in = j.contains("inject") ? j["inject"] : none;
    read(in, "epochs", c.inject.epochs);
    read(in, "batchSize", c.inject.batchSize);
    read(in, "optimizer", c.inject.optimizer);
    read(in, "lr", c.inject.lr);
    read(in, "momentum", c.inject.momentum);
    read(in, "weightDecay", c.inject.weightDecay);
    read(in, "sclMode", c.inject.sclMode);
    const json& ft = j.contains("finetune") ? j["finetune"] : none;
    if (ft.contains("freezeBelowLayer")) {
        if (ft["freezeBelowLayer"].is_null())
            c.finetune.freezeBelowLayer.reset();
        else
            c.finetune.freezeBelowLayer = ft["freezeBelowLayer"].get<int>();
    }
    read(ft, "head", c.finetune.head);
    read(ft, "headHidden", c.finetune.headHidden);
    read(ft, "epochs", c.finetune.epochs);
    read(ft, "batchSize", c.finetune.batchSize);
    read(ft, "lr", c.finetune.lr);
    read(ft, "weightDecay", c.finetune.weightDecay);
    const json& de = j.contains("defense") ? j["defense"] : none;
    read(de, "numPerturbations", c.defense.numPerturbations);
    read(de, "fraction", c.defense.fraction);
    read(de, "percentile", c.defense.percentile);
    read(de, "fixedThreshold", c.defense.fixedThreshold);
    read(de, "calibrationSize", c.defense.calibrationSize);
    read(de, "evalSize", c.defense.evalSize);
    read(de, "onionMaxRemoval", c.defense.onionMaxRemoval);
    read(de, "pruneFraction", c.defense.pruneFraction);
    read(de, "rareTrigger", c.defense.rareTrigger);
    const json& me = j.contains("metrics") ? j["metrics"] : none;
    read(me, "gamma", c.gamma);
    read(me, "beta", c.beta);
    const json& an = j.contains("analysis") ? j["analysis"] : none;
    read(an, "kernelWidth", c.analysis.kernelWidth);
    read(an, "groupSize", c.analysis.groupSize);
    read(an, "geometrySize", c.analysis.geometrySize);
    read(an, "probeTrainSize", c.analysis.probeTrainSize);
    read(an, "probeEvalSize", c.analysis.probeEvalSize);
    read(an, "attentionSamples", c.analysis.attentionSamples);
    c.validate();
    return c;
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("outputDir");
    return sha256_hex(j.dump());
}

std::uint64_t ExperimentConfig::stream(const char* name) const { return derive_seed(seed, name); }

corpus::Task ExperimentConfig::task() const { return corpus::parse_task(corpus.task); }

encoder::MlmOptions ExperimentConfig::mlm_options() const {
    encoder::MlmOptions o;
    o.epochs = pretrain.epochs;
    o.batchSize = pretrain.batchSize;
    o.maskRate = pretrain.maskRate;
    o.optim.lr = pretrain.lr;
    o.seed = derive_seed(stream("train"), "mlm");
    return o;
}

injector::InjectOptions ExperimentConfig::inject_options() const {
    injector::InjectOptions o;
    o.epochs = inject.epochs;
    o.batchSize = inject.batchSize;
    o.optim.kind = inject.optimizer == "sgd" ? encoder::OptimKind::Sgd : encoder::OptimKind::AdamW;
    o.optim.lr = inject.lr;
    o.optim.momentum = inject.momentum;
    o.optim.weightDecay = inject.weightDecay;
    o.sclMode = inject.sclMode == "standard" ? injector::SclMode::Standard : injector::SclMode::NegativesOnly;
    o.seed = derive_seed(stream("train"), "inject");
    return o;
}

victim::FineTuneSpec ExperimentConfig::finetune_spec() const {
    victim::FineTuneSpec s;
    s.freezeBelowLayer = finetune.freezeBelowLayer;
    s.headKind = encoder::parse_arch(finetune.head);
    s.headHidden = finetune.headHidden;
    s.epochs = finetune.epochs;
    s.batchSize = finetune.batchSize;
    s.optim.lr = finetune.lr;
    s.optim.weightDecay = finetune.weightDecay;
    s.seed = derive_seed(stream("train"), "finetune");
    return s;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config is not valid JSON: " + std::string(e.what()));
    }
    return ExperimentConfig::from_json(j);
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ValidationError("bad override key: " + key);
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        if (!node->contains(part)) (*node)[part] = json::object();
        node = &(*node)[part];
        start = dot + 1;
    }
}

}  // namespace synghost::harness
