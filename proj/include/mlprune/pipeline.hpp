// SPDX-License-Identifier: Apache-2.0
//
// End-to-end orchestration: calibration sampling, pruning and perplexity
// evaluation. The CLI is a thin layer over these functions.

#pragma once

#include "mlprune/allocation.hpp"
#include "mlprune/calib_stats.hpp"
#include "mlprune/criteria.hpp"
#include "mlprune/masker.hpp"
#include "mlprune/model.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mlprune {

struct ManifestEntry {
    std::string           language;
    std::filesystem::path path;
    std::size_t           n_samples = 0;
};

// One "<lang-code> <path> <n-samples>" per line; blank lines and '#' comments
// are skipped. Relative paths resolve against base_dir. Evaluation manifests
// may use 0 for "every window".
inline std::vector<ManifestEntry> parse_manifest(std::istream & in, const std::filesystem::path & base_dir = {}, bool allow_zero = false) {
    std::vector<ManifestEntry> out;
    std::set<std::string>      seen;
    std::string                line;
    std::size_t                lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        std::istringstream ls(line);
        std::string        lang, path, count, extra;
        if (!(ls >> lang)) {
            continue;
        }
        long long n = 0;
        if (!(ls >> path >> count) || (ls >> extra)) {
            throw Error("manifest line " + std::to_string(lineno) + ": expected '<lang-code> <path> <n-samples>'");
        }
        try {
            std::size_t pos = 0;
            n               = std::stoll(count, &pos);
            if (pos != count.size()) {
                n = -1;
            }
        } catch (const std::exception &) {
            n = -1;
        }
        if (n < 0 || (n == 0 && !allow_zero)) {
            throw Error("manifest line " + std::to_string(lineno) + ": sample count must be a positive integer");
        }
        if (!seen.insert(lang).second) {
            throw Error("manifest line " + std::to_string(lineno) + ": duplicate language '" + lang + "'");
        }
        std::filesystem::path p(path);
        if (p.is_relative() && !base_dir.empty()) {
            p = base_dir / p;
        }
        out.push_back({lang, p, static_cast<std::size_t>(n)});
    }
    if (out.empty()) {
        throw Error("manifest: no languages");
    }
    return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path & path, bool allow_zero = false) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open manifest '" + path.string() + "'");
    }
    return parse_manifest(in, path.parent_path(), allow_zero);
}

// Distinct start offsets drawn uniformly from [0, n_tokens - window], sorted.
inline std::vector<std::size_t> draw_window_offsets(std::size_t n_tokens, std::size_t window, std::size_t count, Rng & rng) {
    if (window == 0) {
        throw Error("window length must be positive");
    }
    if (n_tokens < window) {
        throw Error("corpus shorter than one window (" + std::to_string(n_tokens) + " < " + std::to_string(window) + " tokens)");
    }
    const std::size_t positions = n_tokens - window + 1;
    if (count > positions) {
        throw Error("corpus too short for " + std::to_string(count) + " distinct windows");
    }
    std::set<std::size_t> picked;
    while (picked.size() < count) {
        picked.insert(static_cast<std::size_t>(rng.below(positions)));
    }
    return {picked.begin(), picked.end()};
}

struct CalibrateOptions {
    std::size_t   window = kDefaultMaxSequence;
    double        eps    = 5e-5;
    std::uint64_t seed   = 0;
};

inline std::uint64_t language_seed(std::uint64_t seed, const std::string & lang) {
    std::uint64_t h = 1469598103934665603ULL; // FNV-1a
    for (char c : lang) {
        h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    }
    return seed ^ h;
}

// Runs capture forwards over seeded windows of each language's token stream.
inline CalibStats calibrate(const WeightStore & weights, const std::vector<std::pair<ManifestEntry, std::vector<TokenId>>> & corpora, const CalibrateOptions & opt) {
    if (corpora.empty()) {
        throw Error("calibrate: no languages");
    }
    std::vector<std::string> langs;
    for (const auto & [entry, _] : corpora) {
        langs.push_back(entry.language);
    }
    CalibStats stats(langs, opt.eps, CalibStats::sites_of(weights.graph()));
    for (const auto & [entry, tokens] : corpora) {
        Rng        rng(language_seed(opt.seed, entry.language));
        const auto offsets = draw_window_offsets(tokens.size(), opt.window, entry.n_samples, rng);
        for (auto off : offsets) {
            ForwardOptions fo;
            fo.max_sequence = std::max(opt.window, kDefaultMaxSequence);
            fo.sink         = [&](const SiteId & site, MatrixView<const float> acts) { stats.accumulate(site, entry.language, acts); };
            forward(weights, std::span<const TokenId>(tokens).subspan(off, opt.window), fo);
        }
    }
    return stats;
}

inline std::vector<TokenId> read_byte_tokens(const std::filesystem::path & path) {
    return byte_tokenize(read_file(path)).tokens;
}

inline Container stats_container(const CalibStats & stats, const std::vector<ManifestEntry> & manifest, const CalibrateOptions & opt) {
    Container   c = stats.to_container();
    std::string m;
    for (const auto & e : manifest) {
        m += (m.empty() ? "" : ";") + e.language + " " + e.path.filename().string() + " " + std::to_string(e.n_samples);
    }
    c.metadata["manifest"] = m;
    c.metadata["seed"]     = std::to_string(opt.seed);
    c.metadata["window"]   = std::to_string(opt.window);
    return c;
}

struct PruneConfig {
    CriterionConfig criterion;
    AllocConfig     alloc;
    Grouping        grouping = Grouping::PerOutputRow;
};

struct PruneResult {
    SparsityPlan plan;
    MaskSet      masks;
    WeightStore  pruned;
    VerifyReport report;
};

inline PruneResult prune(const WeightStore & weights, const CalibStats * stats, const PruneConfig & cfg) {
    const ModelGraph & g = weights.graph();
    if (needs_stats(cfg.criterion.kind) && !stats) {
        throw Error(std::string("criterion ") + criterion_name(cfg.criterion.kind) + " needs calibration statistics");
    }
    if (stats) {
        check_stats_compatible(cfg.criterion, *stats);
        if (cfg.alloc.kind == AllocKind::Cwl && stats->languages().size() < 2) {
            throw Error("CWL allocation needs statistics for at least 2 languages");
        }
        for (const auto & site : g.sites()) {
            if (stats->width(site) != g.site_width(site.kind)) {
                throw Error("statistics do not match the model at " + site.name());
            }
        }
    }

    PruneResult res;
    res.plan              = make_plan(cfg.alloc, g.n_layers, stats);
    res.masks.plan_ratios = res.plan.ratios;

    std::map<SiteId, SiteSignals> signals;
    for (const auto & lin : g.linears()) {
        const SiteId site = lin.site();
        if (needs_stats(cfg.criterion.kind) && !signals.count(site)) {
            signals.emplace(site, site_signals(cfg.criterion, *stats, site));
        }
        const SiteSignals empty;
        auto              scores = score(cfg.criterion, weights.matrix(lin.name), needs_stats(cfg.criterion.kind) ? signals.at(site) : empty);
        scores.name              = lin.name;
        scores.grouping          = cfg.grouping;
        res.masks.masks[lin.name] = {lin.layer, build_mask(scores, res.plan.ratios[lin.layer], cfg.grouping)};
    }
    res.pruned = apply(weights, res.masks);
    res.report = verify(res.masks, res.plan);
    return res;
}

struct PplRow {
    std::string language;
    double      perplexity = 0.0;
    std::size_t tokens     = 0; // predicted positions
};

struct PplTable {
    std::vector<PplRow> rows;

    // Macro-average over languages.
    double average() const {
        double s = 0.0;
        for (const auto & r : rows) {
            s += r.perplexity;
        }
        return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
    }

    std::string text() const {
        std::string out = "language        perplexity     tokens\n";
        char        buf[128];
        for (const auto & r : rows) {
            std::snprintf(buf, sizeof(buf), "%-12s  %12.6f  %9zu\n", r.language.c_str(), r.perplexity, r.tokens);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "%-12s  %12.6f\n", "average", average());
        return out + buf;
    }

    std::string csv() const {
        std::string out = "language,perplexity,tokens\n";
        char        buf[128];
        for (const auto & r : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%.10g,%zu\n", r.language.c_str(), r.perplexity, r.tokens);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "average,%.10g,\n", average());
        return out + buf;
    }
};

// Consecutive non-overlapping windows from the start of the stream; a short
// tail of at least 2 tokens forms a final window. max_windows == 0 means all.
inline std::vector<TokenBatch> eval_windows(const std::vector<TokenId> & tokens, std::size_t window, std::size_t max_windows, const std::string & lang) {
    if (window < 2) {
        throw Error("evaluation window must be at least 2 tokens");
    }
    std::vector<TokenBatch> out;
    for (std::size_t off = 0; off + 2 <= tokens.size(); off += window) {
        if (max_windows && out.size() == max_windows) {
            break;
        }
        const std::size_t len = std::min(window, tokens.size() - off);
        out.push_back({{tokens.begin() + static_cast<std::ptrdiff_t>(off), tokens.begin() + static_cast<std::ptrdiff_t>(off + len)}, lang});
    }
    if (out.empty()) {
        throw Error("evaluation corpus for '" + lang + "' has fewer than 2 tokens");
    }
    return out;
}

inline PplTable eval_ppl(const WeightStore & weights, const std::vector<std::pair<std::string, std::vector<TokenBatch>>> & corpora, const MaskSet * mask = nullptr) {
    if (corpora.empty()) {
        throw Error("eval-ppl: no evaluation corpora");
    }
    const WeightStore   masked = mask ? apply(weights, *mask) : WeightStore{};
    const WeightStore & w      = mask ? masked : weights;
    PplTable            table;
    for (const auto & [lang, batches] : corpora) {
        std::size_t tokens = 0;
        for (const auto & b : batches) {
            tokens += b.tokens.size() - 1;
        }
        table.rows.push_back({lang, perplexity(w, batches), tokens});
    }
    return table;
}

} // namespace mlprune
