// SPDX-License-Identifier: Apache-2.0
//
// Per-weight importance scores: magnitude, Wanda, M-Wanda, RIA and M-RIA.
// Scores are computed in f64 and are always finite and non-negative.

#pragma once

#include "mlprune/calib_stats.hpp"
#include "mlprune/core.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mlprune {

enum class CriterionKind { Magnitude, Wanda, MWanda, Ria, MRia };

inline const char * criterion_name(CriterionKind k) {
    switch (k) {
        case CriterionKind::Magnitude: return "magnitude";
        case CriterionKind::Wanda:     return "wanda";
        case CriterionKind::MWanda:    return "m-wanda";
        case CriterionKind::Ria:       return "ria";
        case CriterionKind::MRia:      return "m-ria";
    }
    return "?";
}

inline CriterionKind parse_criterion(const std::string & s) {
    for (auto k : {CriterionKind::Magnitude, CriterionKind::Wanda, CriterionKind::MWanda, CriterionKind::Ria, CriterionKind::MRia}) {
        if (s == criterion_name(k)) {
            return k;
        }
    }
    throw Error("unknown criterion '" + s + "'");
}

inline bool is_multilingual(CriterionKind k) { return k == CriterionKind::MWanda || k == CriterionKind::MRia; }
inline bool needs_stats(CriterionKind k) { return k != CriterionKind::Magnitude; }

struct CriterionConfig {
    CriterionKind kind   = CriterionKind::Wanda;
    double        lambda = 0.2;  // variance scale
    double        eps    = 5e-5; // activation threshold, 0 disables
    double        alpha  = 0.5;  // RIA activation exponent
};

enum class Grouping { PerOutputRow, PerLayer };

inline const char * grouping_name(Grouping g) { return g == Grouping::PerOutputRow ? "row" : "layer"; }

inline Grouping parse_grouping(const std::string & s) {
    if (s == "row") {
        return Grouping::PerOutputRow;
    }
    if (s == "layer") {
        return Grouping::PerLayer;
    }
    throw Error("unknown grouping '" + s + "' (expected row or layer)");
}

struct ImportanceTensor {
    std::string name;
    MatrixD     scores;
    Grouping    grouping = Grouping::PerOutputRow;
};

inline constexpr double kVarianceGuard = 1e-12;

namespace detail {

inline void check_finite(MatrixView<const float> w) {
    for (float v : w.flat()) {
        if (!std::isfinite(v)) {
            throw Error("criteria: weight matrix has non-finite entries");
        }
    }
}

inline void check_length(std::span<const double> v, std::size_t n, const char * what) {
    if (v.size() != n) {
        throw Error(std::string("criteria: ") + what + " length does not match C_in");
    }
}

// |W_ij| * col[j] * prob[j], evaluated left to right.
inline MatrixD scale_columns(MatrixView<const float> w, std::span<const double> col, std::span<const double> prob = {}) {
    MatrixD s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double v = std::fabs(static_cast<double>(w(i, j))) * col[j];
            if (!prob.empty()) {
                v *= prob[j];
            }
            s(i, j) = v;
        }
    }
    return s;
}

} // namespace detail

inline ImportanceTensor score_magnitude(MatrixView<const float> w) {
    detail::check_finite(w);
    MatrixD s(w.rows(), w.cols());
    for (std::size_t i = 0; i < s.size(); ++i) {
        s.storage()[i] = std::fabs(static_cast<double>(w.flat()[i]));
    }
    return {{}, std::move(s)};
}

inline ImportanceTensor score_wanda(MatrixView<const float> w, std::span<const double> l2) {
    detail::check_finite(w);
    detail::check_length(l2, w.cols(), "l2");
    for (double v : l2) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw Error("criteria: l2 norms must be finite and non-negative");
        }
    }
    return {{}, detail::scale_columns(w, l2)};
}

// base + lambda * minmax(var_inter / (var_intra_mean + guard)).
// A constant ratio vector normalizes to all zeros.
inline std::vector<double> enhanced_activation(std::span<const double> base, std::span<const double> var_inter, std::span<const double> var_intra_mean, double lambda) {
    if (var_inter.size() != base.size() || var_intra_mean.size() != base.size()) {
        throw Error("enhanced_activation: length mismatch");
    }
    std::vector<double> out(base.begin(), base.end());
    if (lambda == 0.0) {
        return out;
    }
    std::vector<double> ratio(base.size());
    for (std::size_t j = 0; j < ratio.size(); ++j) {
        if (var_intra_mean[j] < 0.0) {
            throw Error("enhanced_activation: negative intra-language variance");
        }
        ratio[j] = var_inter[j] / (var_intra_mean[j] + kVarianceGuard);
    }
    const auto [lo_it, hi_it] = std::minmax_element(ratio.begin(), ratio.end());
    const double lo = ratio.empty() ? 0.0 : *lo_it;
    const double hi = ratio.empty() ? 0.0 : *hi_it;
    for (std::size_t j = 0; j < out.size(); ++j) {
        const double norm = hi > lo ? (ratio[j] - lo) / (hi - lo) : 0.0;
        out[j] += lambda * norm;
    }
    return out;
}

inline void check_probability(std::span<const double> p) {
    for (double v : p) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw Error("criteria: activation probability outside [0, 1]");
        }
    }
}

inline ImportanceTensor score_mwanda(MatrixView<const float> w, std::span<const double> enhanced, std::span<const double> prob) {
    detail::check_finite(w);
    detail::check_length(enhanced, w.cols(), "enhanced activation");
    detail::check_length(prob, w.cols(), "activation probability");
    check_probability(prob);
    return {{}, detail::scale_columns(w, enhanced, prob)};
}

// RI_ij = |W_ij| / sum_k |W_kj| + |W_ij| / sum_k |W_ik|, with 0/0 -> 0.
inline MatrixD relative_importance(MatrixView<const float> w) {
    detail::check_finite(w);
    std::vector<double> row_sum(w.rows(), 0.0), col_sum(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double a = std::fabs(static_cast<double>(w(i, j)));
            row_sum[i] += a;
            col_sum[j] += a;
        }
    }
    MatrixD ri(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double a = std::fabs(static_cast<double>(w(i, j)));
            ri(i, j)       = (col_sum[j] > 0.0 ? a / col_sum[j] : 0.0) + (row_sum[i] > 0.0 ? a / row_sum[i] : 0.0);
        }
    }
    return ri;
}

inline std::vector<double> pow_elementwise(std::span<const double> v, double alpha) {
    std::vector<double> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) {
        out[j] = std::pow(v[j], alpha);
    }
    return out;
}

inline ImportanceTensor score_ria(MatrixView<const float> w, std::span<const double> l2, double alpha) {
    detail::check_length(l2, w.cols(), "l2");
    MatrixD    s   = relative_importance(w);
    const auto act = pow_elementwise(l2, alpha);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        for (std::size_t j = 0; j < s.cols(); ++j) {
            s(i, j) *= act[j];
        }
    }
    return {{}, std::move(s)};
}

// enhanced must be built from l2^alpha.
inline ImportanceTensor score_mria(MatrixView<const float> w, std::span<const double> enhanced, std::span<const double> prob) {
    detail::check_length(enhanced, w.cols(), "enhanced activation");
    detail::check_length(prob, w.cols(), "activation probability");
    check_probability(prob);
    MatrixD s = relative_importance(w);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        for (std::size_t j = 0; j < s.cols(); ++j) {
            s(i, j) = s(i, j) * enhanced[j] * prob[j];
        }
    }
    return {{}, std::move(s)};
}

// Checks that stats can serve the criterion; eps must match the calibration
// threshold unless it disables the probability term.
inline void check_stats_compatible(const CriterionConfig & cfg, const CalibStats & stats) {
    if (!is_multilingual(cfg.kind)) {
        return;
    }
    if (cfg.eps != 0.0 && cfg.eps != stats.eps()) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "criterion eps %.9g does not match calibration eps %.9g (re-calibrate or pass --eps 0)", cfg.eps, stats.eps());
        throw Error(buf);
    }
    if (cfg.lambda != 0.0 && stats.languages().size() < 2) {
        throw Error("variance term needs statistics for at least 2 languages");
    }
}

// Site-level inputs for the criterion, derived from calibration statistics.
struct SiteSignals {
    std::vector<double> activation;  // l2, l2^alpha, or their enhanced forms
    std::vector<double> probability; // empty unless multilingual
};

inline SiteSignals site_signals(const CriterionConfig & cfg, const CalibStats & stats, const SiteId & site) {
    check_stats_compatible(cfg, stats);
    SiteSignals sig;
    auto        l2 = pooled_l2(stats, site);
    switch (cfg.kind) {
        case CriterionKind::Magnitude: break;
        case CriterionKind::Wanda:     sig.activation = std::move(l2); break;
        case CriterionKind::Ria:       sig.activation = std::move(l2); break;
        case CriterionKind::MWanda:
        case CriterionKind::MRia: {
            auto base = cfg.kind == CriterionKind::MRia ? pow_elementwise(l2, cfg.alpha) : std::move(l2);
            if (cfg.lambda != 0.0) {
                sig.activation = enhanced_activation(base, inter_variance(stats, site), mean_intra_variance(stats, site), cfg.lambda);
            } else {
                sig.activation = std::move(base);
            }
            if (cfg.eps == 0.0) {
                sig.probability.assign(sig.activation.size(), 1.0);
            } else {
                sig.probability = activation_probability(stats, site);
            }
            break;
        }
    }
    return sig;
}

inline ImportanceTensor score(const CriterionConfig & cfg, MatrixView<const float> w, const SiteSignals & sig) {
    switch (cfg.kind) {
        case CriterionKind::Magnitude: return score_magnitude(w);
        case CriterionKind::Wanda:     return score_wanda(w, sig.activation);
        case CriterionKind::MWanda:    return score_mwanda(w, sig.activation, sig.probability);
        case CriterionKind::Ria:       return score_ria(w, sig.activation, cfg.alpha);
        case CriterionKind::MRia:      return score_mria(w, sig.activation, sig.probability);
    }
    throw Error("unknown criterion");
}

} // namespace mlprune
