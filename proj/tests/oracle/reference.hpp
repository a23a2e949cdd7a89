// SPDX-License-Identifier: Apache-2.0
//
// Straight-line reference implementations used as test oracles. Nothing here
// calls into mlprune's criteria, statistics or masker code; every quantity is
// recomputed from raw activations with plain loops.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace oracle {

using Vec    = std::vector<double>;
using Rows   = std::vector<Vec>;  // tokens x features
using Sample = Rows;
using Lang   = std::vector<Sample>;

// Raw activations for one capture site: [language][sample][token][feature].
struct RawSite {
    std::vector<Lang> langs;

    std::size_t width() const { return langs.at(0).at(0).at(0).size(); }
};

enum class Kind { Magnitude, Wanda, MWanda, Ria, MRia };

struct Config {
    Kind   kind   = Kind::Wanda;
    double lambda = 0.2;
    double eps    = 5e-5;
    double alpha  = 0.5;
};

inline Vec column_l2(const RawSite & site) {
    Vec out(site.width(), 0.0);
    for (std::size_t j = 0; j < out.size(); ++j) {
        double acc = 0.0;
        for (const auto & lang : site.langs) {
            for (const auto & sample : lang) {
                for (const auto & tok : sample) {
                    acc += tok[j] * tok[j];
                }
            }
        }
        out[j] = std::sqrt(acc);
    }
    return out;
}

inline Vec language_mean(const Lang & lang, std::size_t width) {
    Vec         sum(width, 0.0);
    std::size_t n = 0;
    for (const auto & sample : lang) {
        for (const auto & tok : sample) {
            for (std::size_t j = 0; j < width; ++j) {
                sum[j] += tok[j];
            }
            ++n;
        }
    }
    for (auto & v : sum) {
        v /= static_cast<double>(n);
    }
    return sum;
}

inline Vec sample_mean(const Sample & s, std::size_t width) {
    Vec m(width, 0.0);
    for (const auto & tok : s) {
        for (std::size_t j = 0; j < width; ++j) {
            m[j] += tok[j];
        }
    }
    for (auto & v : m) {
        v /= static_cast<double>(s.size());
    }
    return m;
}

// Population variance of the language means.
inline Vec var_inter(const RawSite & site) {
    const std::size_t w = site.width();
    Rows              means;
    for (const auto & lang : site.langs) {
        means.push_back(language_mean(lang, w));
    }
    Vec out(w, 0.0);
    for (std::size_t j = 0; j < w; ++j) {
        double mu = 0.0;
        for (const auto & m : means) {
            mu += m[j];
        }
        mu /= static_cast<double>(means.size());
        for (const auto & m : means) {
            out[j] += (m[j] - mu) * (m[j] - mu) / static_cast<double>(means.size());
        }
    }
    return out;
}

// Population variance of one language's sample means, two-pass.
inline Vec var_intra(const Lang & lang, std::size_t w) {
    Rows sm;
    for (const auto & s : lang) {
        sm.push_back(sample_mean(s, w));
    }
    Vec out(w, 0.0);
    for (std::size_t j = 0; j < w; ++j) {
        double mu = 0.0;
        for (const auto & m : sm) {
            mu += m[j];
        }
        mu /= static_cast<double>(sm.size());
        for (const auto & m : sm) {
            out[j] += (m[j] - mu) * (m[j] - mu) / static_cast<double>(sm.size());
        }
    }
    return out;
}

inline Vec probability(const RawSite & site, double eps) {
    Vec out(site.width(), 0.0);
    if (eps == 0.0) {
        std::fill(out.begin(), out.end(), 1.0);
        return out;
    }
    for (std::size_t j = 0; j < out.size(); ++j) {
        double acc = 0.0;
        for (const auto & lang : site.langs) {
            double above = 0.0, n = 0.0;
            for (const auto & sample : lang) {
                for (const auto & tok : sample) {
                    above += std::fabs(tok[j]) > eps ? 1.0 : 0.0;
                    n += 1.0;
                }
            }
            acc += above / n;
        }
        out[j] = acc / static_cast<double>(site.langs.size());
    }
    return out;
}

// base_j + lambda * minmax(VAR)_j, VAR = inter / (mean intra + 1e-12).
inline Vec enhanced(const RawSite & site, const Vec & base, double lambda) {
    const std::size_t w     = site.width();
    const Vec         inter = var_inter(site);
    Vec               intra(w, 0.0);
    for (const auto & lang : site.langs) {
        const Vec v = var_intra(lang, w);
        for (std::size_t j = 0; j < w; ++j) {
            intra[j] += v[j] / static_cast<double>(site.langs.size());
        }
    }
    Vec var(w);
    for (std::size_t j = 0; j < w; ++j) {
        var[j] = inter[j] / (intra[j] + 1e-12);
    }
    double lo = var[0], hi = var[0];
    for (double v : var) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Vec out(w);
    for (std::size_t j = 0; j < w; ++j) {
        const double n = hi > lo ? (var[j] - lo) / (hi - lo) : 0.0;
        out[j]         = base[j] + lambda * n;
    }
    return out;
}

// |W_ij| / sum_k |W_kj| + |W_ij| / sum_k |W_ik|, sums recomputed per element.
inline double relative_importance(const Rows & w, std::size_t i, std::size_t j) {
    double col = 0.0, row = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        col += std::fabs(w[k][j]);
    }
    for (std::size_t k = 0; k < w[i].size(); ++k) {
        row += std::fabs(w[i][k]);
    }
    const double a = std::fabs(w[i][j]);
    return (col > 0.0 ? a / col : 0.0) + (row > 0.0 ? a / row : 0.0);
}

// Reference scores for W (C_out x C_in) under the given criterion.
inline Rows reference_scores(const Rows & w, const RawSite & site, const Config & cfg) {
    const std::size_t rows = w.size(), cols = w.at(0).size();
    Rows              s(rows, Vec(cols, 0.0));
    Vec               l2 = cfg.kind == Kind::Magnitude ? Vec(cols, 1.0) : column_l2(site);
    Vec               act(cols, 1.0), prob(cols, 1.0);
    switch (cfg.kind) {
        case Kind::Magnitude: break;
        case Kind::Wanda: act = l2; break;
        case Kind::Ria:
            for (std::size_t j = 0; j < cols; ++j) {
                act[j] = std::pow(l2[j], cfg.alpha);
            }
            break;
        case Kind::MWanda:
            act  = cfg.lambda == 0.0 ? l2 : enhanced(site, l2, cfg.lambda);
            prob = probability(site, cfg.eps);
            break;
        case Kind::MRia: {
            Vec base(cols);
            for (std::size_t j = 0; j < cols; ++j) {
                base[j] = std::pow(l2[j], cfg.alpha);
            }
            act  = cfg.lambda == 0.0 ? base : enhanced(site, base, cfg.lambda);
            prob = probability(site, cfg.eps);
            break;
        }
    }
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const bool   ria  = cfg.kind == Kind::Ria || cfg.kind == Kind::MRia;
            const double base = ria ? relative_importance(w, i, j) : std::fabs(w[i][j]);
            s[i][j]           = base * act[j] * prob[j];
        }
    }
    return s;
}

// Exhaustive search for the minimum score-sum over all k-subsets of a group.
inline double min_subset_sum(const Vec & scores, std::size_t k) {
    const std::size_t n    = scores.size();
    double            best = INFINITY;
    for (std::uint32_t bits = 0; bits < (1U << n); ++bits) {
        if (static_cast<std::size_t>(__builtin_popcount(bits)) != k) {
            continue;
        }
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (bits & (1U << i)) {
                sum += scores[i];
            }
        }
        best = std::min(best, sum);
    }
    return best;
}

// Pruned set by full sort with the (score asc, index desc) rule.
inline std::vector<bool> reference_prune_group(const Vec & scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] < scores[b];
        }
        return a > b;
    });
    std::vector<bool> pruned(scores.size(), false);
    for (std::size_t i = 0; i < k; ++i) {
        pruned[idx[i]] = true;
    }
    return pruned;
}

// Next-token NLL with an explicit log(sum exp) on the raw logits.
inline double reference_nll(const Rows & logits, const std::vector<int> & tokens) {
    double nll = 0.0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        double mx = logits[t][0];
        for (double v : logits[t]) {
            mx = std::max(mx, v);
        }
        double z = 0.0;
        for (double v : logits[t]) {
            z += std::exp(v - mx);
        }
        nll -= logits[t][tokens[t + 1]] - mx - std::log(z);
    }
    return nll;
}

inline double reference_pearson(const Vec & a, const Vec & b) {
    const double n = static_cast<double>(a.size());
    double       sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a[i];
        sb += b[i];
    }
    const double ma = sa / n, mb = sb / n;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        return 0.0;
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace oracle
