#include "synghost/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "synghost/common/errors.hpp"

namespace synghost::metrics {

namespace {

double match_rate(std::span<const Record> records, const char* what) {
    if (records.empty()) throw ValidationError(std::string(what) + ": empty record list");
    long hit = 0;
    for (const auto& [pred, ref] : records)
        if (pred == ref) ++hit;
    return static_cast<double>(hit) / static_cast<double>(records.size());
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

double asr(std::span<const Record> records) { return match_rate(records, "asr"); }
double cacc(std::span<const Record> records) { return match_rate(records, "cacc"); }

double t_acr(const std::map<std::string, double>& perTaskAsr, double gamma) {
    if (perTaskAsr.empty()) throw ValidationError("t_acr: no tasks");
    long hit = 0;
    for (const auto& [task, a] : perTaskAsr)
        if (a >= gamma) ++hit;
    return static_cast<double>(hit) / static_cast<double>(perTaskAsr.size());
}

double l_acr(const std::map<int, int>& targets, const std::map<int, double>& triggerAsr, const std::set<int>& labels,
             double beta) {
    if (targets.empty()) throw ValidationError("l_acr: empty trigger set");
    if (labels.empty()) throw ValidationError("l_acr: empty label space");
    require(targets.size() == triggerAsr.size(), "l_acr: trigger maps differ");
    const long T = static_cast<long>(targets.size());
    const long Y = static_cast<long>(labels.size());
    const long cap = (T + Y - 1) / Y;
    std::map<int, long> effective;
    for (const auto& [trigger, y] : targets) {
        auto it = triggerAsr.find(trigger);
        require(it != triggerAsr.end(), "l_acr: trigger maps differ");
        require(labels.contains(y), "l_acr: target outside label space");
        if (it->second > beta) ++effective[y];
    }
    long sum = 0;
    for (int y : labels) sum += std::min(effective[y], cap);
    return static_cast<double>(sum) / static_cast<double>(T);
}

void MetricReport::validate() const {
    auto rate = [](double v) { return v >= 0.0 && v <= 1.0; };
    require(gamma > 0.0 && gamma <= 1.0 && beta > 0.0 && beta <= 1.0, "thresholds must lie in (0,1]");
    require(rate(cacc) && rate(tAcr) && rate(lAcr), "metric rates must lie in [0,1]");
    for (const auto& [t, a] : asrPerTrigger) require(rate(a), "ASR must lie in [0,1]");
}

double MetricReport::best_asr() const {
    double best = 0.0;
    for (const auto& [t, a] : asrPerTrigger) best = std::max(best, a);
    return best;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [t, v] : asrPerTrigger) a[std::to_string(t)] = v;
    return {{"task", task},   {"asrPerTrigger", a}, {"cacc", cacc}, {"caccDropVsClean", caccDropVsClean},
            {"tAcr", tAcr},   {"lAcr", lAcr},       {"gamma", gamma}, {"beta", beta}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
    MetricReport r;
    r.task = j.at("task");
    for (const auto& [k, v] : j.at("asrPerTrigger").items()) r.asrPerTrigger[std::stoi(k)] = v.get<double>();
    r.cacc = j.at("cacc");
    r.caccDropVsClean = j.at("caccDropVsClean");
    r.tAcr = j.at("tAcr");
    r.lAcr = j.at("lAcr");
    r.gamma = j.at("gamma");
    r.beta = j.at("beta");
    return r;
}

std::string MetricReport::csv_header() const {
    std::string h = "task";
    for (const auto& [t, v] : asrPerTrigger) h += ",asr_" + std::to_string(t);
    return h + ",cacc,caccDropVsClean,tAcr,lAcr,gamma,beta";
}

std::string MetricReport::csv_row() const {
    std::string r = task;
    for (const auto& [t, v] : asrPerTrigger) r += "," + num(v);
    for (double v : {cacc, caccDropVsClean, tAcr, lAcr, gamma, beta}) r += "," + num(v);
    return r;
}

}  // namespace synghost::metrics
