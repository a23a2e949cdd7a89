// SPDX-License-Identifier: Apache-2.0
//
// Per-site, per-language calibration statistics accumulated from streamed
// input activations. All accumulation is in f64.

#pragma once

#include "mlprune/container.hpp"
#include "mlprune/core.hpp"
#include "mlprune/weights.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mlprune {

struct SiteLangStats {
    std::size_t                token_count = 0;
    std::vector<double>        sum;    // sum of x_j over tokens
    std::vector<double>        sum_sq; // sum of x_j^2 over tokens
    std::vector<std::uint64_t> count_above_eps;
    MatrixD                    sample_means; // one row per calibration sequence

    explicit SiteLangStats(std::size_t width = 0) : sum(width, 0.0), sum_sq(width, 0.0), count_above_eps(width, 0), sample_means(0, width) {}

    std::size_t width() const { return sum.size(); }
    std::size_t n_samples() const { return sample_means.rows(); }

    std::vector<double> mean() const {
        std::vector<double> m(width(), 0.0);
        if (token_count == 0) {
            return m;
        }
        for (std::size_t j = 0; j < m.size(); ++j) {
            m[j] = sum[j] / static_cast<double>(token_count);
        }
        return m;
    }

    void append_sample_mean(std::span<const double> row) {
        auto & s = sample_means.storage();
        s.insert(s.end(), row.begin(), row.end());
        sample_means = MatrixD(sample_means.rows() + 1, width(), std::move(s));
    }
};

struct SiteSpec {
    SiteId      id;
    std::size_t width;
};

// Statistics for a fixed language set over a fixed site list. The
// threshold eps is fixed at construction; eps == 0 disables the activation
// probability term downstream.
class CalibStats {
public:
    CalibStats() = default;

    CalibStats(std::vector<std::string> languages, double eps, const std::vector<SiteSpec> & sites) : languages_(std::move(languages)), eps_(eps) {
        if (languages_.empty()) {
            throw Error("calib stats: no languages");
        }
        if (!(eps_ >= 0.0) || !std::isfinite(eps_)) {
            throw Error("calib stats: eps must be finite and non-negative");
        }
        for (std::size_t i = 0; i < languages_.size(); ++i) {
            if (languages_[i].empty() || languages_[i].find_first_of(",:/ ") != std::string::npos) {
                throw Error("calib stats: invalid language code '" + languages_[i] + "'");
            }
            for (std::size_t k = 0; k < i; ++k) {
                if (languages_[k] == languages_[i]) {
                    throw Error("calib stats: duplicate language '" + languages_[i] + "'");
                }
            }
        }
        for (const auto & s : sites) {
            if (stats_.count(s.id)) {
                throw Error("calib stats: duplicate site " + s.id.name());
            }
            sites_.push_back(s.id);
            stats_.emplace(s.id, std::vector<SiteLangStats>(languages_.size(), SiteLangStats(s.width)));
        }
    }

    static std::vector<SiteSpec> sites_of(const ModelGraph & g) {
        std::vector<SiteSpec> out;
        for (const auto & id : g.sites()) {
            out.push_back({id, g.site_width(id.kind)});
        }
        return out;
    }

    const std::vector<std::string> & languages() const { return languages_; }
    const std::vector<SiteId> &      sites() const { return sites_; }
    double                           eps() const { return eps_; }

    std::size_t language_index(std::string_view lang) const {
        for (std::size_t i = 0; i < languages_.size(); ++i) {
            if (languages_[i] == lang) {
                return i;
            }
        }
        throw Error("calib stats: unknown language '" + std::string(lang) + "'");
    }

    const std::vector<SiteLangStats> & site(const SiteId & id) const {
        auto it = stats_.find(id);
        if (it == stats_.end()) {
            throw Error("calib stats: unknown site " + id.name());
        }
        return it->second;
    }

    const SiteLangStats & at(const SiteId & id, std::string_view lang) const { return site(id)[language_index(lang)]; }

    std::size_t width(const SiteId & id) const { return site(id).front().width(); }

    std::size_t token_count(std::string_view lang) const {
        return sites_.empty() ? 0 : at(sites_.front(), lang).token_count;
    }

    // Adds activations (tokens x features) for one site and language.
    // sample_starts lists the first row of each calibration sequence; it must
    // begin at 0 and be strictly increasing. One sample_means row is appended
    // per sequence.
    void accumulate(const SiteId & id, std::string_view lang, MatrixView<const float> acts, std::span<const std::size_t> sample_starts) {
        auto it = stats_.find(id);
        if (it == stats_.end()) {
            throw Error("calib stats: unknown site " + id.name());
        }
        SiteLangStats & s = it->second[language_index(lang)];
        if (acts.cols() != s.width()) {
            throw Error("calib stats: feature dimension mismatch at " + id.name());
        }
        if (sample_starts.empty() || sample_starts.front() != 0) {
            throw Error("calib stats: sample boundaries must start at row 0");
        }
        for (std::size_t b = 0; b < sample_starts.size(); ++b) {
            const std::size_t begin = sample_starts[b];
            const std::size_t end   = b + 1 < sample_starts.size() ? sample_starts[b + 1] : acts.rows();
            if (end <= begin || end > acts.rows()) {
                throw Error("calib stats: invalid sample boundaries");
            }
            std::vector<double> sample_sum(s.width(), 0.0);
            for (std::size_t t = begin; t < end; ++t) {
                const auto row = acts.row(t);
                for (std::size_t j = 0; j < row.size(); ++j) {
                    const double x = row[j];
                    sample_sum[j] += x;
                    s.sum_sq[j] += x * x;
                    if (std::fabs(x) > eps_) {
                        s.count_above_eps[j] += 1;
                    }
                }
            }
            const double n = static_cast<double>(end - begin);
            for (std::size_t j = 0; j < sample_sum.size(); ++j) {
                s.sum[j] += sample_sum[j];
                sample_sum[j] /= n;
            }
            s.token_count += end - begin;
            s.append_sample_mean(sample_sum);
        }
    }

    // One sequence.
    void accumulate(const SiteId & id, std::string_view lang, MatrixView<const float> acts) {
        const std::size_t start = 0;
        accumulate(id, lang, acts, std::span<const std::size_t>(&start, 1));
    }

    // Layout: tensors "<site>/<lang>/{sum_sq,mean,sample_means,count_above_eps}",
    // metadata "languages", "eps", "token_counts".
    Container to_container() const {
        char      buf[64];
        Container c;
        std::string langs, counts;
        for (const auto & l : languages_) {
            langs += (langs.empty() ? "" : ",") + l;
            counts += (counts.empty() ? "" : ",") + l + ":" + std::to_string(token_count(l));
        }
        c.metadata["languages"]    = langs;
        c.metadata["token_counts"] = counts;
        std::snprintf(buf, sizeof(buf), "%.17g", eps_);
        c.metadata["eps"] = buf;
        for (const auto & id : sites_) {
            for (std::size_t li = 0; li < languages_.size(); ++li) {
                const auto &        s      = stats_.at(id)[li];
                const std::string   prefix = id.name() + "/" + languages_[li] + "/";
                const auto          mean   = s.mean();
                std::vector<float>  counts_f(s.width());
                for (std::size_t j = 0; j < s.width(); ++j) {
                    counts_f[j] = static_cast<float>(s.count_above_eps[j]);
                }
                auto to_f32 = [](std::span<const double> v) { return std::vector<float>(v.begin(), v.end()); };
                c.add(prefix + "sum_sq", {s.width()}, to_f32(s.sum_sq));
                c.add(prefix + "mean", {s.width()}, to_f32(mean));
                c.add(prefix + "sample_means", {s.n_samples(), s.width()}, to_f32(s.sample_means.storage()));
                c.add(prefix + "count_above_eps", {s.width()}, std::move(counts_f));
            }
        }
        return c;
    }

    static CalibStats from_container(const Container & c) {
        std::vector<std::string> languages = split(c.meta("languages"), ',');
        double                   eps       = 0.0;
        try {
            eps = std::stod(c.meta("eps"));
        } catch (const std::invalid_argument &) {
            throw Error("calib stats: malformed eps '" + c.meta("eps") + "'");
        }
        std::map<std::string, std::size_t> counts;
        for (const auto & item : split(c.meta("token_counts"), ',')) {
            const auto colon = item.rfind(':');
            if (colon == std::string::npos) {
                throw Error("calib stats: malformed token_counts entry '" + item + "'");
            }
            counts[item.substr(0, colon)] = std::stoull(item.substr(colon + 1));
        }

        std::vector<SiteSpec> sites;
        for (const auto & r : c.records) {
            const auto slash = r.name.find('/');
            if (slash == std::string::npos) {
                throw Error("calib stats: unexpected tensor '" + r.name + "'");
            }
            const SiteId id = SiteId::parse(r.name.substr(0, slash));
            if (std::none_of(sites.begin(), sites.end(), [&](const SiteSpec & s) { return s.id == id; })) {
                const auto & sq = c.at(id.name() + "/" + languages.at(0) + "/sum_sq");
                if (sq.shape.size() != 1) {
                    throw Error("calib stats: sum_sq of " + id.name() + " is not 1-D");
                }
                sites.push_back({id, sq.shape[0]});
            }
        }
        std::sort(sites.begin(), sites.end(), [](const SiteSpec & a, const SiteSpec & b) { return a.id < b.id; });

        CalibStats stats(languages, eps, sites);
        for (const auto & spec : sites) {
            for (std::size_t li = 0; li < languages.size(); ++li) {
                const std::string prefix = spec.id.name() + "/" + languages[li] + "/";
                auto &            s      = stats.stats_.at(spec.id)[li];
                auto              vec    = [&](const char * field) -> const TensorRecord & {
                    const auto & t = c.at(prefix + field);
                    if (t.shape != std::vector<std::size_t>{spec.width}) {
                        throw Error("calib stats: tensor '" + prefix + field + "' has unexpected shape");
                    }
                    return t;
                };
                auto it = counts.find(languages[li]);
                if (it == counts.end()) {
                    throw Error("calib stats: no token count for language '" + languages[li] + "'");
                }
                s.token_count     = it->second;
                const auto & sq   = vec("sum_sq");
                const auto & mean = vec("mean");
                const auto & cnt  = vec("count_above_eps");
                for (std::size_t j = 0; j < spec.width; ++j) {
                    s.sum_sq[j] = sq.data[j];
                    s.sum[j]    = static_cast<double>(mean.data[j]) * static_cast<double>(s.token_count);
                    if (!(cnt.data[j] >= 0.0f) || cnt.data[j] > static_cast<float>(s.token_count) || cnt.data[j] != std::floor(cnt.data[j])) {
                        throw Error("calib stats: invalid count_above_eps in '" + prefix + "'");
                    }
                    s.count_above_eps[j] = static_cast<std::uint64_t>(cnt.data[j]);
                }
                const auto & sm = c.at(prefix + "sample_means");
                if (sm.shape.size() != 2 || sm.shape[1] != spec.width) {
                    throw Error("calib stats: tensor '" + prefix + "sample_means' has unexpected shape");
                }
                s.sample_means = MatrixD(sm.shape[0], spec.width, std::vector<double>(sm.data.begin(), sm.data.end()));
            }
        }
        return stats;
    }

    static std::vector<std::string> split(const std::string & s, char sep) {
        std::vector<std::string> out;
        std::stringstream        ss(s);
        std::string              item;
        while (std::getline(ss, item, sep)) {
            if (!item.empty()) {
                out.push_back(item);
            }
        }
        return out;
    }

private:
    std::vector<std::string>                    languages_;
    double                                      eps_ = 0.0;
    std::vector<SiteId>                         sites_;
    std::map<SiteId, std::vector<SiteLangStats>> stats_;
};

// ||X_j||_2 pooled over every language's tokens.
inline std::vector<double> pooled_l2(const CalibStats & stats, const SiteId & site) {
    const auto &        per_lang = stats.site(site);
    std::vector<double> out(per_lang.front().width(), 0.0);
    std::size_t         tokens = 0;
    for (const auto & s : per_lang) {
        tokens += s.token_count;
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += s.sum_sq[j];
        }
    }
    if (tokens == 0) {
        throw Error("pooled_l2: no tokens at " + site.name());
    }
    for (auto & v : out) {
        v = std::sqrt(v);
    }
    return out;
}

// Population variance of the per-language means around their unweighted mean.
inline std::vector<double> inter_variance(const CalibStats & stats, const SiteId & site) {
    const auto & per_lang = stats.site(site);
    if (per_lang.size() < 2) {
        throw Error("inter_variance: needs at least 2 languages");
    }
    const std::size_t                width = per_lang.front().width();
    std::vector<std::vector<double>> means;
    for (const auto & s : per_lang) {
        means.push_back(s.mean());
    }
    const double        n = static_cast<double>(means.size());
    std::vector<double> out(width, 0.0);
    for (std::size_t j = 0; j < width; ++j) {
        double mu = 0.0;
        for (const auto & m : means) {
            mu += m[j];
        }
        mu /= n;
        double acc = 0.0;
        for (const auto & m : means) {
            acc += (m[j] - mu) * (m[j] - mu);
        }
        out[j] = acc / n;
    }
    return out;
}

// Population variance across one language's per-sequence mean vectors.
inline std::vector<double> intra_variance(const CalibStats & stats, const SiteId & site, std::string_view lang) {
    const auto & sm = stats.at(site, lang).sample_means;
    if (sm.rows() < 2) {
        throw Error("intra_variance: language '" + std::string(lang) + "' has fewer than 2 samples");
    }
    const double        n = static_cast<double>(sm.rows());
    std::vector<double> out(sm.cols(), 0.0);
    for (std::size_t j = 0; j < sm.cols(); ++j) {
        double mu = 0.0;
        for (std::size_t r = 0; r < sm.rows(); ++r) {
            mu += sm(r, j);
        }
        mu /= n;
        double acc = 0.0;
        for (std::size_t r = 0; r < sm.rows(); ++r) {
            acc += (sm(r, j) - mu) * (sm(r, j) - mu);
        }
        out[j] = acc / n;
    }
    return out;
}

// Unweighted mean of intra_variance over all languages.
inline std::vector<double> mean_intra_variance(const CalibStats & stats, const SiteId & site) {
    std::vector<double> out(stats.width(site), 0.0);
    for (const auto & lang : stats.languages()) {
        const auto v = intra_variance(stats, site, lang);
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += v[j];
        }
    }
    for (auto & v : out) {
        v /= static_cast<double>(stats.languages().size());
    }
    return out;
}

// Fraction of tokens with |x_j| > eps, macro-averaged over languages.
// eps == 0 is the disable sentinel and yields all ones.
inline std::vector<double> activation_probability(const CalibStats & stats, const SiteId & site) {
    const auto &        per_lang = stats.site(site);
    std::vector<double> out(per_lang.front().width(), 1.0);
    if (stats.eps() == 0.0) {
        return out;
    }
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t li = 0; li < per_lang.size(); ++li) {
        const auto & s = per_lang[li];
        if (s.token_count == 0) {
            throw Error("activation_probability: language '" + stats.languages()[li] + "' has no tokens");
        }
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += static_cast<double>(s.count_above_eps[j]) / static_cast<double>(s.token_count);
        }
    }
    for (auto & v : out) {
        v /= static_cast<double>(per_lang.size());
    }
    return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw Error("cosine: length mismatch");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw Error("cosine: zero-norm vector");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Mean pairwise cosine similarity of typological language vectors. Returned
// as similarity; callers wanting a diversity score take 1 - value.
inline double language_diversity(const std::map<std::string, std::vector<double>> & vectors) {
    if (vectors.size() < 2) {
        throw Error("language_diversity: needs at least 2 languages");
    }
    std::vector<const std::vector<double> *> v;
    for (const auto & [_, vec] : vectors) {
        v.push_back(&vec);
    }
    double      sum   = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        for (std::size_t k = i + 1; k < v.size(); ++k) {
            sum += cosine_similarity(*v[i], *v[k]);
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

} // namespace mlprune
