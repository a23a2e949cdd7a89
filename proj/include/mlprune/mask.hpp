// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mlprune/container.hpp"
#include "mlprune/weights.hpp"

#include <bit>
#include <map>
#include <string>
#include <vector>

namespace mlprune {

// Binary keep-mask over a C_out x C_in matrix, packed 64 entries per word.
// A set bit means the weight is kept.
class Mask {
public:
    Mask() = default;
    Mask(std::size_t rows, std::size_t cols, bool keep = true)
        : rows_(rows), cols_(cols), bits_((rows * cols + 63) / 64, keep ? ~std::uint64_t{0} : 0) {
        trim();
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return rows_ * cols_; }

    bool keep(std::size_t r, std::size_t c) const { return keep_flat(r * cols_ + c); }
    bool keep_flat(std::size_t i) const { return (bits_[i / 64] >> (i % 64)) & 1U; }

    void set(std::size_t r, std::size_t c, bool keep) { set_flat(r * cols_ + c, keep); }
    void set_flat(std::size_t i, bool keep) {
        const std::uint64_t bit = std::uint64_t{1} << (i % 64);
        if (keep) {
            bits_[i / 64] |= bit;
        } else {
            bits_[i / 64] &= ~bit;
        }
    }

    std::size_t kept() const {
        std::size_t n = 0;
        for (auto w : bits_) {
            n += static_cast<std::size_t>(std::popcount(w));
        }
        return n;
    }
    std::size_t pruned() const { return size() - kept(); }

    std::size_t pruned_in_row(std::size_t r) const {
        std::size_t n = 0;
        for (std::size_t c = 0; c < cols_; ++c) {
            n += keep(r, c) ? 0 : 1;
        }
        return n;
    }

    std::vector<float> to_f32() const {
        std::vector<float> out(size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = keep_flat(i) ? 1.0f : 0.0f;
        }
        return out;
    }

    static Mask from_f32(std::size_t rows, std::size_t cols, std::span<const float> values) {
        if (values.size() != rows * cols) {
            throw Error("mask: buffer size does not match shape");
        }
        Mask m(rows, cols, false);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i] != 0.0f && values[i] != 1.0f) {
                throw Error("mask: entries must be 0 or 1");
            }
            m.set_flat(i, values[i] == 1.0f);
        }
        return m;
    }

    bool operator==(const Mask &) const = default;

private:
    void trim() {
        if (size() % 64 != 0 && !bits_.empty()) {
            bits_.back() &= (std::uint64_t{1} << (size() % 64)) - 1;
        }
    }

    std::size_t                rows_ = 0;
    std::size_t                cols_ = 0;
    std::vector<std::uint64_t> bits_;
};

struct MaskEntry {
    std::size_t layer = 0;
    Mask        mask;

    bool operator==(const MaskEntry &) const = default;
};

struct MaskSet {
    std::map<std::string, MaskEntry> masks;
    std::vector<double>              plan_ratios;

    // Fraction of pruned weights per layer, over all masked matrices of the layer.
    std::vector<double> achieved_sparsity() const {
        std::size_t n_layers = plan_ratios.size();
        for (const auto & [_, e] : masks) {
            n_layers = std::max(n_layers, e.layer + 1);
        }
        std::vector<std::size_t> pruned(n_layers, 0), total(n_layers, 0);
        for (const auto & [_, e] : masks) {
            pruned[e.layer] += e.mask.pruned();
            total[e.layer] += e.mask.size();
        }
        std::vector<double> out(n_layers, 0.0);
        for (std::size_t l = 0; l < n_layers; ++l) {
            out[l] = total[l] ? static_cast<double>(pruned[l]) / static_cast<double>(total[l]) : 0.0;
        }
        return out;
    }

    bool operator==(const MaskSet &) const = default;
};

// Copy of the weights with masked-out entries set to exactly 0.0f.
inline WeightStore apply(const WeightStore & weights, const MaskSet & masks) {
    WeightStore out = weights;
    for (const auto & [name, entry] : masks.masks) {
        const auto & t = weights.tensor(name);
        if (t.shape.size() != 2 || t.shape[0] != entry.mask.rows() || t.shape[1] != entry.mask.cols()) {
            throw Error("apply: mask shape does not match tensor '" + name + "'");
        }
        auto data = out.mutable_data(name);
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!entry.mask.keep_flat(i)) {
                data[i] = 0.0f;
            }
        }
    }
    return out;
}

// All-ones masks over every prunable matrix of the graph.
inline MaskSet dense_masks(const ModelGraph & g) {
    MaskSet ms;
    ms.plan_ratios.assign(g.n_layers, 0.0);
    for (const auto & lin : g.linears()) {
        ms.masks[lin.name] = {lin.layer, Mask(lin.rows, lin.cols, true)};
    }
    return ms;
}

} // namespace mlprune
