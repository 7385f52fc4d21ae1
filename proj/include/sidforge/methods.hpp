#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "sidforge/baselines.hpp"
#include "sidforge/metrics.hpp"

namespace sidforge {

/// Method names accepted by the comparison harness, in sorted order. The r3_* names are
/// ablations of r3: no reference vector, no SC term, no PD term, and lambda = 0.
inline const std::vector<std::string>& compare_method_names() {
    static const std::vector<std::string> names = {"kmeans",  "r3",          "r3_noref", "r3_nometric", "r3_nopd",
                                                   "r3_nosc", "rkmeans",     "rqvae",    "vqvae"};
    return names;
}

inline bool is_compare_method(const std::string& name) {
    const auto& names = compare_method_names();
    return std::find(names.begin(), names.end(), name) != names.end();
}

/// Resolves a comparison method name into a training configuration derived from `base`.
inline TrainConfig config_for_method(const std::string& name, const TrainConfig& base) {
    TrainConfig cfg = base;
    if (name == "r3_noref") {
        cfg.method = Method::r3;
        cfg.use_reference = false;
    } else if (name == "r3_nosc") {
        cfg.method = Method::r3;
        cfg.use_sc = false;
    } else if (name == "r3_nopd") {
        cfg.method = Method::r3;
        cfg.use_pd = false;
    } else if (name == "r3_nometric") {
        cfg.method = Method::r3;
        cfg.lambda = 0.0;
    } else if (is_compare_method(name)) {
        cfg.method = parse_method(name);
    } else {
        std::string valid;
        for (const auto& n : compare_method_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw UsageError("unknown method '" + name + "' (valid: " + valid + ")");
    }
    return cfg;
}

struct CompareRow {
    std::string method;
    MetricsReport report;
};

/// Fits every method on the same data with the same seed and evaluates each SID table.
inline std::vector<CompareRow> compare_methods(const EmbeddingDataset& dataset, std::vector<std::string> methods,
                                               const TrainConfig& base, const EvalOptions& eval) {
    for (const auto& m : methods) config_for_method(m, base);
    std::sort(methods.begin(), methods.end());
    methods.erase(std::unique(methods.begin(), methods.end()), methods.end());
    std::vector<CompareRow> rows;
    for (const auto& m : methods) {
        const TrainResult fit = train(dataset, config_for_method(m, base));
        const SidTable sids = emit_sids(dataset, fit.params);
        rows.push_back({m, evaluate_sids(dataset, sids, &fit.params, eval)});
    }
    return rows;
}

inline constexpr const char* kCompareHeader = "method,sc,pd,cr,gini,usage";

inline std::string format_compare_csv(const std::vector<CompareRow>& rows) {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
    std::string out = std::string(kCompareHeader) + "\n";
    for (const auto& r : rows) {
        out += r.method + "," + opt(r.report.sc) + "," + opt(r.report.pd) + "," + num(r.report.collision_rate) + "," +
               num(r.report.gini) + "," + num(r.report.mean_usage()) + "\n";
    }
    return out;
}

}  // namespace sidforge
