// SPDX-License-Identifier: Apache-2.0
//
// Turns importance scores and a sparsity plan into keep-masks, and checks the
// achieved sparsity against the plan.

#pragma once

#include "mlprune/allocation.hpp"
#include "mlprune/container.hpp"
#include "mlprune/criteria.hpp"
#include "mlprune/mask.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

namespace mlprune {

// floor(ratio * n), tolerant of ratio * n landing a few ulps below an integer.
inline std::size_t prune_count(double ratio, std::size_t n) {
    const double x = ratio * static_cast<double>(n);
    return std::min(n, static_cast<std::size_t>(std::floor(x + 1e-9)));
}

namespace detail {

// Prunes the `count` lowest-scoring entries of one group. Ties keep the lower
// flat index.
inline void prune_group(std::span<const double> scores, std::size_t base, std::size_t count, Mask & mask, std::vector<std::size_t> & order) {
    order.resize(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto lower = [&](std::size_t a, std::size_t b) { return scores[a] != scores[b] ? scores[a] < scores[b] : a > b; };
    if (count < order.size()) {
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(), lower);
    }
    for (std::size_t k = 0; k < count; ++k) {
        mask.set_flat(base + order[k], false);
    }
}

} // namespace detail

inline Mask build_mask(const ImportanceTensor & scores, double ratio, Grouping grouping) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw Error("build_mask: ratio outside [0, 1]");
    }
    const auto & s = scores.scores;
    for (double v : s.storage()) {
        if (!std::isfinite(v)) {
            throw Error("build_mask: non-finite score in '" + scores.name + "'");
        }
    }
    Mask                     mask(s.rows(), s.cols(), true);
    std::vector<std::size_t> order;
    if (grouping == Grouping::PerOutputRow) {
        const std::size_t k = prune_count(ratio, s.cols());
        for (std::size_t r = 0; r < s.rows(); ++r) {
            detail::prune_group(s.row(r), r * s.cols(), k, mask, order);
        }
    } else {
        detail::prune_group(s.storage(), 0, prune_count(ratio, s.size()), mask, order);
    }
    return mask;
}

struct LayerReport {
    std::size_t layer       = 0;
    double      target      = 0.0;
    double      achieved    = 0.0;
    std::size_t pruned      = 0;
    std::size_t total       = 0;
    bool        floor_effect = false; // achieved below target by less than one weight per row
    bool        deviates    = false;  // off by more than one weight per row
};

struct VerifyReport {
    std::vector<LayerReport> layers;

    bool ok() const {
        return std::none_of(layers.begin(), layers.end(), [](const LayerReport & l) { return l.deviates; });
    }

    std::string text() const {
        std::string out = "layer  target    achieved  pruned/total        status\n";
        char        buf[160];
        for (const auto & l : layers) {
            const char * status = l.deviates ? "DEVIATES" : l.floor_effect ? "floor" : "ok";
            std::snprintf(buf, sizeof(buf), "%5zu  %.6f  %.6f  %9zu/%-9zu  %s\n", l.layer, l.target, l.achieved, l.pruned, l.total, status);
            out += buf;
        }
        return out;
    }
};

inline VerifyReport verify(const MaskSet & masks, const SparsityPlan & plan) {
    std::size_t n_layers = 0;
    for (const auto & [_, e] : masks.masks) {
        n_layers = std::max(n_layers, e.layer + 1);
    }
    if (plan.ratios.size() != n_layers) {
        throw Error("verify: plan has " + std::to_string(plan.ratios.size()) + " layers, masks cover " + std::to_string(n_layers));
    }
    VerifyReport report;
    report.layers.resize(n_layers);
    std::vector<std::size_t> rows(n_layers, 0);
    for (std::size_t l = 0; l < n_layers; ++l) {
        report.layers[l].layer  = l;
        report.layers[l].target = plan.ratios[l];
    }
    for (const auto & [_, e] : masks.masks) {
        auto & lr = report.layers[e.layer];
        lr.pruned += e.mask.pruned();
        lr.total += e.mask.size();
        rows[e.layer] += e.mask.rows();
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        auto & lr  = report.layers[l];
        lr.achieved = lr.total ? static_cast<double>(lr.pruned) / static_cast<double>(lr.total) : 0.0;
        // Deviation in weights, normalised per output row.
        const double per_row = rows[l] ? std::fabs(lr.target * static_cast<double>(lr.total) - static_cast<double>(lr.pruned)) / static_cast<double>(rows[l]) : 0.0;
        if (per_row > 1.0 + 1e-9) {
            lr.deviates = true;
        } else if (static_cast<double>(lr.pruned) < lr.target * static_cast<double>(lr.total) - 1e-9) {
            lr.floor_effect = true;
        }
    }
    return report;
}

// Masks exported as f32 0/1 tensors named after their weight matrices; layer
// indices and the plan go into metadata.
inline Container masks_to_container(const MaskSet & masks, const SparsityPlan & plan, std::map<std::string, std::string> extra = {}) {
    Container c;
    c.metadata = std::move(extra);
    char        buf[64];
    std::string ratios, importance;
    for (std::size_t l = 0; l < plan.ratios.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%.17g", plan.ratios[l]);
        ratios += (l ? "," : "") + std::string(buf);
    }
    for (std::size_t l = 0; l < plan.importance.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%.17g", plan.importance[l]);
        importance += (l ? "," : "") + std::string(buf);
    }
    c.metadata["kind"]            = "masks";
    c.metadata["plan_ratios"]     = ratios;
    c.metadata["plan_importance"] = importance;
    for (const auto & [name, e] : masks.masks) {
        c.add(name, {e.mask.rows(), e.mask.cols()}, e.mask.to_f32());
    }
    return c;
}

inline std::vector<double> parse_doubles(const std::string & csv) {
    std::vector<double> out;
    for (const auto & item : CalibStats::split(csv, ',')) {
        out.push_back(std::stod(item));
    }
    return out;
}

struct LoadedMasks {
    MaskSet      masks;
    SparsityPlan plan;
};

inline LoadedMasks masks_from_container(const Container & c, const ModelGraph & g) {
    LoadedMasks out;
    out.plan.ratios     = parse_doubles(c.meta("plan_ratios"));
    out.plan.importance = c.metadata.count("plan_importance") ? parse_doubles(c.meta("plan_importance")) : std::vector<double>{};
    out.masks.plan_ratios = out.plan.ratios;
    for (const auto & lin : g.linears()) {
        const auto * r = c.find(lin.name);
        if (!r) {
            continue;
        }
        if (r->shape != std::vector<std::size_t>{lin.rows, lin.cols}) {
            throw Error("masks: '" + lin.name + "' has unexpected shape");
        }
        out.masks.masks[lin.name] = {lin.layer, Mask::from_f32(lin.rows, lin.cols, r->data)};
    }
    if (out.masks.masks.size() != c.records.size()) {
        throw Error("masks: container holds tensors that are not prunable matrices of this model");
    }
    return out;
}

} // namespace mlprune
