#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>

#include <json.hpp>

namespace synghost::metrics {

using Record = std::pair<int, int>;  // (predicted, reference)

double asr(std::span<const Record> records);
double cacc(std::span<const Record> records);
// Fraction of tasks with ASR >= gamma.
double t_acr(const std::map<std::string, double>& perTaskAsr, double gamma = 0.8);
// Per label, effective triggers (ASR > beta) are counted up to
// ceil(|T| / |Y|); the capped sum is divided by |T|.
double l_acr(const std::map<int, int>& triggerTargets, const std::map<int, double>& triggerAsr,
             const std::set<int>& labelSpace, double beta = 0.8);

struct MetricReport {
    std::string task;
    std::map<int, double> asrPerTrigger;
    double cacc = 0.0;
    double caccDropVsClean = 0.0;  // clean-control CACC minus this CACC
    double tAcr = 0.0;
    double lAcr = 0.0;
    double gamma = 0.8;
    double beta = 0.8;

    void validate() const;
    double best_asr() const;
    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
    std::string csv_header() const;
    std::string csv_row() const;
};

}  // namespace synghost::metrics
