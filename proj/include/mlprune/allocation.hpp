// SPDX-License-Identifier: Apache-2.0
//
// Layerwise sparsity allocation: uniform, outlier-weighted (OWL) and
// correlation-weighted (CWL).

#pragma once

#include "mlprune/calib_stats.hpp"
#include "mlprune/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

namespace mlprune {

enum class AllocKind { Uniform, Owl, Cwl };
enum class CwlBlock { Attn, Mlp };

inline const char * alloc_name(AllocKind k) {
    switch (k) {
        case AllocKind::Uniform: return "uniform";
        case AllocKind::Owl:     return "owl";
        case AllocKind::Cwl:     return "cwl";
    }
    return "?";
}

inline AllocKind parse_alloc(const std::string & s) {
    for (auto k : {AllocKind::Uniform, AllocKind::Owl, AllocKind::Cwl}) {
        if (s == alloc_name(k)) {
            return k;
        }
    }
    throw Error("unknown allocation '" + s + "'");
}

inline const char * cwl_block_name(CwlBlock b) { return b == CwlBlock::Attn ? "attn" : "mlp"; }

inline CwlBlock parse_cwl_block(const std::string & s) {
    if (s == "attn") {
        return CwlBlock::Attn;
    }
    if (s == "mlp") {
        return CwlBlock::Mlp;
    }
    throw Error("unknown CWL block '" + s + "' (expected attn or mlp)");
}

struct AllocConfig {
    AllocKind kind  = AllocKind::Uniform;
    double    ratio = 0.5;  // global target R
    double    gamma = 0.04; // ratios stay within [R - gamma, R + gamma]
    double    owl_m = 5.0;
    CwlBlock  block = CwlBlock::Attn;
};

struct SparsityPlan {
    std::vector<double> ratios;
    std::vector<double> importance; // raw layer scores; empty for uniform plans
};

inline SparsityPlan uniform_plan(std::size_t n_layers, double ratio) {
    // R = 0 is accepted as the no-op plan.
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw Error("uniform_plan: ratio out of range [0, 1)");
    }
    if (n_layers == 0) {
        throw Error("uniform_plan: no layers");
    }
    return {std::vector<double>(n_layers, ratio), {}};
}

// Mean-centred affine map: r_n = R - gamma * d_n / max|d|, d_n = c_n - mean(c).
// The mean of r is R and every r_n lies in [R - gamma, R + gamma]; more
// important layers get lower ratios.
inline SparsityPlan rescale_to_plan(std::span<const double> importance, double ratio, double gamma) {
    if (importance.empty()) {
        throw Error("rescale_to_plan: empty importance vector");
    }
    if (!(gamma >= 0.0)) {
        throw Error("rescale_to_plan: gamma must be non-negative");
    }
    for (double c : importance) {
        if (!std::isfinite(c)) {
            throw Error("rescale_to_plan: non-finite importance");
        }
    }
    if (!(ratio - gamma > 0.0 && ratio + gamma < 1.0)) {
        throw Error("rescale_to_plan: [R - gamma, R + gamma] must lie inside (0, 1)");
    }
    const double n    = static_cast<double>(importance.size());
    const double mean = std::accumulate(importance.begin(), importance.end(), 0.0) / n;

    std::vector<double> dev(importance.size());
    double              max_abs = 0.0;
    for (std::size_t i = 0; i < dev.size(); ++i) {
        dev[i]  = importance[i] - mean;
        max_abs = std::max(max_abs, std::fabs(dev[i]));
    }

    SparsityPlan plan{std::vector<double>(importance.size(), ratio), {importance.begin(), importance.end()}};
    if (max_abs == 0.0 || gamma == 0.0) {
        return plan;
    }
    for (std::size_t i = 0; i < dev.size(); ++i) {
        plan.ratios[i] = ratio - gamma * (dev[i] / max_abs);
    }
    return plan;
}

// Fraction of values exceeding M times their mean.
inline double outlier_fraction(std::span<const double> magnitudes, double m) {
    if (magnitudes.empty()) {
        throw Error("outlier_fraction: no values");
    }
    const double mean      = std::accumulate(magnitudes.begin(), magnitudes.end(), 0.0) / static_cast<double>(magnitudes.size());
    const double threshold = m * mean;
    const auto   n         = std::count_if(magnitudes.begin(), magnitudes.end(), [&](double v) { return v > threshold; });
    return static_cast<double>(n) / static_cast<double>(magnitudes.size());
}

// Per layer: outlier fraction over |mean activation| of every feature at every
// site of the layer, for every language.
inline std::vector<double> owl_importance(const CalibStats & stats, double m) {
    if (stats.sites().empty()) {
        throw Error("owl_importance: empty statistics");
    }
    std::size_t n_layers = 0;
    for (const auto & s : stats.sites()) {
        n_layers = std::max(n_layers, s.layer + 1);
    }
    std::vector<std::vector<double>> per_layer(n_layers);
    for (const auto & site : stats.sites()) {
        for (const auto & s : stats.site(site)) {
            for (double v : s.mean()) {
                per_layer[site.layer].push_back(std::fabs(v));
            }
        }
    }
    std::vector<double> out(n_layers, 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (per_layer[l].empty()) {
            throw Error("owl_importance: layer " + std::to_string(l) + " has no sites");
        }
        out[l] = outlier_fraction(per_layer[l], m);
    }
    return out;
}

// Pearson correlation; a zero-variance input yields 0.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw Error("pearson: inputs must be non-empty and of equal length");
    }
    const double n  = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double       cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) {
        return 0.0;
    }
    return cov / (std::sqrt(va) * std::sqrt(vb));
}

// Mean Pearson correlation over unordered pairs of rows.
inline double mean_pairwise_pearson(const std::vector<std::vector<double>> & rows) {
    if (rows.size() < 2) {
        throw Error("mean_pairwise_pearson: needs at least 2 vectors");
    }
    double      sum   = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = i + 1; k < rows.size(); ++k) {
            sum += pearson(rows[i], rows[k]);
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

// c_k = Inter_k * sum over languages of Intra_{l,k}, averaged over the
// layer's selected sites.
inline double cwl_site_score(const CalibStats & stats, const SiteId & site) {
    if (stats.languages().size() < 2) {
        throw Error("CWL needs statistics for at least 2 languages");
    }
    std::vector<std::vector<double>> means;
    double                           intra_sum = 0.0;
    for (const auto & s : stats.site(site)) {
        means.push_back(s.mean());
        if (s.n_samples() < 2) {
            throw Error("CWL needs at least 2 calibration samples per language");
        }
        std::vector<std::vector<double>> samples;
        for (std::size_t r = 0; r < s.n_samples(); ++r) {
            const auto row = s.sample_means.row(r);
            samples.emplace_back(row.begin(), row.end());
        }
        intra_sum += mean_pairwise_pearson(samples);
    }
    return mean_pairwise_pearson(means) * intra_sum;
}

inline std::vector<double> cwl_importance(const CalibStats & stats, CwlBlock block) {
    const SiteKind first  = block == CwlBlock::Attn ? SiteKind::AttnIn : SiteKind::MlpIn;
    const SiteKind second = block == CwlBlock::Attn ? SiteKind::OIn : SiteKind::DownIn;

    std::size_t n_layers = 0;
    for (const auto & s : stats.sites()) {
        n_layers = std::max(n_layers, s.layer + 1);
    }
    if (n_layers == 0) {
        throw Error("cwl_importance: empty statistics");
    }
    std::vector<double>      sum(n_layers, 0.0);
    std::vector<std::size_t> count(n_layers, 0);
    for (const auto & site : stats.sites()) {
        if (site.kind == first || site.kind == second) {
            sum[site.layer] += cwl_site_score(stats, site);
            count[site.layer] += 1;
        }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (count[l] == 0) {
            throw Error("cwl_importance: layer " + std::to_string(l) + " has no " + cwl_block_name(block) + " sites");
        }
        sum[l] /= static_cast<double>(count[l]);
    }
    return sum;
}

inline SparsityPlan make_plan(const AllocConfig & cfg, std::size_t n_layers, const CalibStats * stats) {
    if (cfg.kind == AllocKind::Uniform) {
        return uniform_plan(n_layers, cfg.ratio);
    }
    if (!stats) {
        throw Error(std::string(alloc_name(cfg.kind)) + " allocation needs calibration statistics");
    }
    const auto importance = cfg.kind == AllocKind::Owl ? owl_importance(*stats, cfg.owl_m) : cwl_importance(*stats, cfg.block);
    if (importance.size() != n_layers) {
        throw Error("allocation: statistics cover " + std::to_string(importance.size()) + " layers, model has " + std::to_string(n_layers));
    }
    return rescale_to_plan(importance, cfg.ratio, cfg.gamma);
}

// Plain-text table: layer, importance, ratio.
inline std::string plan_table(const SparsityPlan & plan) {
    std::string out = "layer  importance              ratio\n";
    char        buf[128];
    for (std::size_t l = 0; l < plan.ratios.size(); ++l) {
        if (plan.importance.empty()) {
            std::snprintf(buf, sizeof(buf), "%5zu  %-22s  %.6f\n", l, "-", plan.ratios[l]);
        } else {
            std::snprintf(buf, sizeof(buf), "%5zu  %-22.15g  %.6f\n", l, plan.importance[l], plan.ratios[l]);
        }
        out += buf;
    }
    return out;
}

} // namespace mlprune
