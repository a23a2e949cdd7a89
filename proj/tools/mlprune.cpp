// SPDX-License-Identifier: Apache-2.0
//
// mlprune: calibrate, prune, evaluate and inspect decoder models.

#include "mlprune/mlprune.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace mlprune;

namespace {

struct PruneFlags {
    std::string           criterion = "m-wanda";
    std::string           alloc;
    double                ratio  = 0.5;
    double                lambda = 0.2;
    std::optional<double> eps;
    double                gamma     = 0.04;
    double                alpha     = 0.5;
    double                owl_m     = 5.0;
    std::string           cwl_block = "attn";
    std::string           grouping  = "row";

    void add_to(CLI::App * cmd) {
        cmd->add_option("--criterion", criterion, "magnitude | wanda | m-wanda | ria | m-ria")->capture_default_str();
        cmd->add_option("--alloc", alloc, "uniform | owl | cwl (default: cwl for m-wanda/m-ria, else uniform)");
        cmd->add_option("--ratio", ratio, "global sparsity ratio R")->capture_default_str();
        cmd->add_option("--lambda", lambda, "cross-lingual variance scale")->capture_default_str();
        cmd->add_option("--eps", eps, "activation threshold (default: the calibration value; 0 disables)");
        cmd->add_option("--gamma", gamma, "layerwise ratio half-width")->capture_default_str();
        cmd->add_option("--alpha", alpha, "RIA activation exponent")->capture_default_str();
        cmd->add_option("--owl-m", owl_m, "OWL outlier multiplier")->capture_default_str();
        cmd->add_option("--cwl-block", cwl_block, "attn | mlp")->capture_default_str();
        cmd->add_option("--grouping", grouping, "row | layer")->capture_default_str();
    }

    PruneConfig resolve(const CalibStats * stats) const {
        PruneConfig cfg;
        cfg.criterion.kind   = parse_criterion(criterion);
        cfg.criterion.lambda = lambda;
        cfg.criterion.alpha  = alpha;
        cfg.criterion.eps    = eps ? *eps : (stats ? stats->eps() : 0.0);
        if (alloc.empty()) {
            cfg.alloc.kind = is_multilingual(cfg.criterion.kind) ? AllocKind::Cwl : AllocKind::Uniform;
        } else {
            cfg.alloc.kind = parse_alloc(alloc);
        }
        cfg.alloc.ratio = ratio;
        cfg.alloc.gamma = gamma;
        cfg.alloc.owl_m = owl_m;
        cfg.alloc.block = parse_cwl_block(cwl_block);
        cfg.grouping    = parse_grouping(grouping);
        return cfg;
    }
};

std::vector<std::pair<ManifestEntry, std::vector<TokenId>>> read_corpora(const std::vector<ManifestEntry> & manifest) {
    std::vector<std::pair<ManifestEntry, std::vector<TokenId>>> out;
    for (const auto & e : manifest) {
        out.emplace_back(e, read_byte_tokens(e.path));
    }
    return out;
}

std::vector<std::pair<std::string, std::vector<TokenBatch>>> read_eval_corpora(const fs::path & manifest_path, std::size_t window) {
    std::vector<std::pair<std::string, std::vector<TokenBatch>>> out;
    for (const auto & e : load_manifest(manifest_path, true)) {
        out.emplace_back(e.language, eval_windows(read_byte_tokens(e.path), window, e.n_samples, e.language));
    }
    return out;
}

void write_text(const fs::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write '" + path.string() + "'");
    }
    out << text;
}

std::string plan_csv(const SparsityPlan & plan) {
    std::string out = "layer,importance,ratio\n";
    char        buf[128];
    for (std::size_t l = 0; l < plan.ratios.size(); ++l) {
        if (plan.importance.empty()) {
            std::snprintf(buf, sizeof(buf), "%zu,,%.17g\n", l, plan.ratios[l]);
        } else {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", l, plan.importance[l], plan.ratios[l]);
        }
        out += buf;
    }
    return out;
}

std::map<std::string, std::string> prune_metadata(const PruneConfig & cfg) {
    char                               buf[64];
    std::map<std::string, std::string> m;
    m["criterion"] = criterion_name(cfg.criterion.kind);
    m["alloc"]     = alloc_name(cfg.alloc.kind);
    m["grouping"]  = grouping_name(cfg.grouping);
    m["cwl_block"] = cwl_block_name(cfg.alloc.block);
    auto num       = [&](const char * key, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        m[key] = buf;
    };
    num("ratio", cfg.alloc.ratio);
    num("lambda", cfg.criterion.lambda);
    num("eps", cfg.criterion.eps);
    num("gamma", cfg.alloc.gamma);
    num("alpha", cfg.criterion.alpha);
    num("owl_m", cfg.alloc.owl_m);
    return m;
}

int cmd_make_toy(const std::string & out, std::uint64_t seed, std::size_t layers, std::size_t d_model, std::size_t heads, std::size_t d_ff) {
    ModelGraph g;
    g.vocab_size = 256;
    g.d_model    = d_model;
    g.n_layers   = layers;
    g.n_heads    = heads;
    g.d_head     = heads ? d_model / heads : 0;
    g.d_ff       = d_ff;
    if (g.n_heads * g.d_head != g.d_model) {
        throw Error("d_model must be divisible by the head count");
    }
    save(make_random_model(g, seed, 0.08).to_container(), out);
    std::printf("wrote %s (%zu layers, d_model %zu, d_ff %zu)\n", out.c_str(), layers, d_model, d_ff);
    return 0;
}

int cmd_calibrate(const std::string & model, const std::string & manifest_path, const std::string & out, const CalibrateOptions & opt) {
    const auto weights  = WeightStore::from_container(load(model));
    const auto manifest = load_manifest(manifest_path);
    const auto stats    = calibrate(weights, read_corpora(manifest), opt);
    save(stats_container(stats, manifest, opt), out);
    std::printf("wrote %s\n", out.c_str());
    for (const auto & lang : stats.languages()) {
        std::printf("  %-8s %zu samples, %zu tokens\n", lang.c_str(), stats.at(stats.sites().front(), lang).n_samples(), stats.token_count(lang));
    }
    return 0;
}

int cmd_prune(const std::string & model, const std::string & stats_path, const PruneFlags & flags, const std::string & out_dir) {
    const auto                weights = WeightStore::from_container(load(model));
    std::optional<CalibStats> stats;
    if (!stats_path.empty()) {
        stats = CalibStats::from_container(load(stats_path));
    }
    const auto cfg = flags.resolve(stats ? &*stats : nullptr);
    const auto res = prune(weights, stats ? &*stats : nullptr, cfg);

    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    save(res.pruned.to_container(), dir / "model.safetensors");
    save(masks_to_container(res.masks, res.plan, prune_metadata(cfg)), dir / "masks.safetensors");
    write_text(dir / "report.txt", res.report.text());
    write_text(dir / "plan.csv", plan_csv(res.plan));

    std::printf("criterion %s, allocation %s, R = %g\n", criterion_name(cfg.criterion.kind), alloc_name(cfg.alloc.kind), cfg.alloc.ratio);
    std::printf("%s\n%s", plan_table(res.plan).c_str(), res.report.text().c_str());
    std::printf("wrote %s/{model,masks}.safetensors, report.txt, plan.csv\n", out_dir.c_str());
    return res.report.ok() ? 0 : 2;
}

int cmd_eval_ppl(const std::string & model, const std::string & manifest, const std::string & masks_path, std::size_t window, const std::string & out) {
    const auto             weights = WeightStore::from_container(load(model));
    std::optional<MaskSet> masks;
    if (!masks_path.empty()) {
        masks = masks_from_container(load(masks_path), weights.graph()).masks;
    }
    const auto table = eval_ppl(weights, read_eval_corpora(manifest, window), masks ? &*masks : nullptr);
    std::printf("%s", table.text().c_str());
    if (!out.empty()) {
        write_text(out, table.csv());
    }
    return 0;
}

std::size_t layer_of(const std::string & name) {
    unsigned long l = 0;
    if (std::sscanf(name.c_str(), "model.layers.%lu.", &l) == 1) {
        return l;
    }
    return static_cast<std::size_t>(-1);
}

int cmd_inspect(const std::vector<std::string> & paths, bool csv) {
    for (const auto & path : paths) {
        const Container c = load(path);
        std::printf("== %s\n", path.c_str());
        if (c.metadata.count("kind") && c.meta("kind") == "masks") {
            SparsityPlan plan;
            plan.ratios     = parse_doubles(c.meta("plan_ratios"));
            plan.importance = c.metadata.count("plan_importance") ? parse_doubles(c.meta("plan_importance")) : std::vector<double>{};
            MaskSet ms;
            for (const auto & r : c.records) {
                if (r.shape.size() != 2) {
                    throw Error("mask tensor '" + r.name + "' is not 2-D");
                }
                ms.masks[r.name] = {layer_of(r.name), Mask::from_f32(r.shape[0], r.shape[1], r.data)};
            }
            for (const auto & key : {"criterion", "alloc", "grouping", "ratio", "lambda", "eps", "gamma", "alpha", "cwl_block"}) {
                if (c.metadata.count(key)) {
                    std::printf("%-10s %s\n", key, c.meta(key).c_str());
                }
            }
            std::printf("%s", csv ? plan_csv(plan).c_str() : plan_table(plan).c_str());
            std::printf("%s", verify(ms, plan).text().c_str());
        } else if (c.metadata.count("languages")) {
            const auto stats = CalibStats::from_container(c);
            std::printf("eps        %.9g\n", stats.eps());
            for (const auto & key : {"seed", "window", "manifest"}) {
                if (c.metadata.count(key)) {
                    std::printf("%-10s %s\n", key, c.meta(key).c_str());
                }
            }
            std::printf("sites      %zu\n", stats.sites().size());
            std::printf("language   samples   tokens\n");
            for (const auto & lang : stats.languages()) {
                std::printf("%-9s  %7zu  %7zu\n", lang.c_str(), stats.at(stats.sites().front(), lang).n_samples(), stats.token_count(lang));
            }
        } else {
            if (c.metadata.count("d_model")) {
                const auto w = WeightStore::from_container(c);
                std::printf("model: %zu layers, d_model %zu, %zu heads, d_ff %zu, vocab %zu\n", w.graph().n_layers, w.graph().d_model, w.graph().n_heads, w.graph().d_ff, w.graph().vocab_size);
            }
            for (const auto & [k, v] : c.metadata) {
                std::printf("meta %-16s %s\n", k.c_str(), v.c_str());
            }
            for (const auto & r : c.records) {
                std::string shape;
                for (auto d : r.shape) {
                    shape += (shape.empty() ? "" : "x") + std::to_string(d);
                }
                std::size_t zeros = std::count(r.data.begin(), r.data.end(), 0.0f);
                std::printf("%-48s %-12s zeros %.4f\n", r.name.c_str(), shape.c_str(), r.data.empty() ? 0.0 : static_cast<double>(zeros) / r.data.size());
            }
        }
    }
    return 0;
}

std::vector<double> parse_range(const std::string & spec) {
    const auto parts = CalibStats::split(spec, ':');
    if (parts.size() == 3) {
        const double lo = std::stod(parts[0]), hi = std::stod(parts[1]), step = std::stod(parts[2]);
        if (!(step > 0.0) || hi < lo) {
            throw Error("invalid range '" + spec + "'");
        }
        std::vector<double> out;
        for (std::size_t i = 0;; ++i) {
            const double v = lo + static_cast<double>(i) * step;
            if (v > hi + step * 1e-6) {
                break;
            }
            out.push_back(std::round(v * 1e9) / 1e9);
        }
        return out;
    }
    return parse_doubles(spec);
}

struct SweepArgs {
    std::string model, stats, manifest, eval_manifest, out;
    std::string ratios = "0.30:0.70:0.05";
    bool        grid   = false;
    std::size_t window = kDefaultMaxSequence, eval_window = kDefaultMaxSequence;
    std::uint64_t seed = 0;
};

// Ratio sweep, optionally crossed with the M-Wanda hyperparameter grid
// (lambda, eps, gamma, CWL block). Each distinct eps needs its own calibration.
int cmd_sweep(const SweepArgs & a, const PruneFlags & base) {
    const auto weights = WeightStore::from_container(load(a.model));
    const auto eval    = read_eval_corpora(a.eval_manifest, a.eval_window);

    struct Point {
        double lambda, gamma;
        std::optional<double> eps;
        std::string block;
    };
    std::vector<Point> points;
    if (a.grid) {
        for (double lambda : {0.02, 0.2}) {
            for (double eps : {5e-5, 1e-7, 0.0}) {
                for (double gamma : {0.01, 0.04}) {
                    for (const char * block : {"attn", "mlp"}) {
                        points.push_back({lambda, gamma, eps, block});
                    }
                }
            }
        }
    } else {
        points.push_back({base.lambda, base.gamma, base.eps, base.cwl_block});
    }

    std::map<double, CalibStats> by_eps;
    std::optional<CalibStats>    given;
    if (!a.stats.empty()) {
        given = CalibStats::from_container(load(a.stats));
    }
    auto stats_for = [&](std::optional<double> eps) -> const CalibStats * {
        if (given && (!eps || *eps == 0.0 || *eps == given->eps())) {
            return &*given;
        }
        if (a.manifest.empty()) {
            if (given) {
                throw Error("sweep: eps differs from the statistics; pass --manifest to re-calibrate");
            }
            return nullptr;
        }
        const double key = eps.value_or(5e-5);
        auto         it  = by_eps.find(key);
        if (it == by_eps.end()) {
            CalibrateOptions opt{a.window, key, a.seed};
            it = by_eps.emplace(key, calibrate(weights, read_corpora(load_manifest(a.manifest)), opt)).first;
        }
        return &it->second;
    };

    std::string csv = "ratio,criterion,alloc,lambda,eps,gamma,cwl_block";
    for (const auto & [lang, _] : eval) {
        csv += "," + lang;
    }
    csv += ",average\n";

    const auto dense = eval_ppl(weights, eval);
    std::printf("dense average perplexity %.6f\n", dense.average());

    for (const auto & p : points) {
        const CalibStats * stats = stats_for(p.eps);
        for (double r : parse_range(a.ratios)) {
            PruneFlags f = base;
            f.ratio      = r;
            f.lambda     = p.lambda;
            f.gamma      = p.gamma;
            f.eps        = p.eps;
            f.cwl_block  = p.block;
            const auto cfg   = f.resolve(stats);
            const auto res   = prune(weights, stats, cfg);
            const auto table = eval_ppl(res.pruned, eval);
            char       buf[256];
            std::snprintf(buf, sizeof(buf), "%.4f,%s,%s,%.9g,%.9g,%.9g,%s", r, criterion_name(cfg.criterion.kind), alloc_name(cfg.alloc.kind), cfg.criterion.lambda, cfg.criterion.eps, cfg.alloc.gamma, cwl_block_name(cfg.alloc.block));
            csv += buf;
            for (const auto & row : table.rows) {
                std::snprintf(buf, sizeof(buf), ",%.10g", row.perplexity);
                csv += buf;
            }
            std::snprintf(buf, sizeof(buf), ",%.10g\n", table.average());
            csv += buf;
            std::printf("R=%.2f lambda=%g eps=%g gamma=%g block=%s  average perplexity %.6f\n", r, cfg.criterion.lambda, cfg.criterion.eps, cfg.alloc.gamma, cwl_block_name(cfg.alloc.block), table.average());
        }
    }
    if (!a.out.empty()) {
        write_text(a.out, csv);
        std::printf("wrote %s\n", a.out.c_str());
    } else {
        std::printf("%s", csv.c_str());
    }
    return 0;
}

// Replaces "--config <file>" with the file's key=value lines as "--key=value"
// flags placed right after the subcommand, so later command-line flags win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::vector<std::string> from_file;
    for (std::size_t i = 1; i < args.size(); ++i) {
        std::string path;
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
        } else if (args[i].starts_with("--config=")) {
            path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            continue;
        }
        std::istringstream in(read_file(path));
        std::string        line;
        while (std::getline(in, line)) {
            line.erase(std::find(line.begin(), line.end(), '#'), line.end());
            const auto eq    = line.find('=');
            auto       trim  = [](std::string s) {
                s.erase(0, s.find_first_not_of(" \t\r"));
                s.erase(s.find_last_not_of(" \t\r") + 1);
                return s;
            };
            if (trim(line).empty()) {
                continue;
            }
            if (eq == std::string::npos) {
                throw Error("config '" + path + "': expected key=value, got '" + trim(line) + "'");
            }
            from_file.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
        }
        break;
    }
    if (!from_file.empty() && args.size() > 1) {
        args.insert(args.begin() + 2, from_file.begin(), from_file.end());
    }
    return args;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"mlprune: one-shot multilingual pruning for decoder language models"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.footer("Any subcommand accepts --config <file> with flat key=value lines; flags given on the command line take precedence.");

    // calibrate
    std::string      cal_model, cal_manifest, cal_out;
    CalibrateOptions cal_opt;
    auto *           cal = app.add_subcommand("calibrate", "collect per-language activation statistics");
    cal->add_option("--model", cal_model, "model container")->required();
    cal->add_option("--manifest", cal_manifest, "calibration manifest: <lang-code> <path> <n-samples> per line")->required();
    cal->add_option("--out", cal_out, "output statistics container")->required();
    cal->add_option("--eps", cal_opt.eps, "activation threshold (0 disables the probability term)")->capture_default_str();
    cal->add_option("--seed", cal_opt.seed, "window sampling seed")->capture_default_str();
    cal->add_option("--window", cal_opt.window, "tokens per calibration sample")->capture_default_str();

    // prune
    std::string pr_model, pr_stats, pr_out;
    PruneFlags  pr_flags;
    auto *      pr = app.add_subcommand("prune", "score, allocate and mask");
    pr->add_option("--model", pr_model, "model container")->required();
    pr->add_option("--stats", pr_stats, "statistics container");
    pr->add_option("--out", pr_out, "output directory")->required();
    pr_flags.add_to(pr);

    // eval-ppl
    std::string ev_model, ev_manifest, ev_masks, ev_out;
    std::size_t ev_window = kDefaultMaxSequence;
    auto *      ev        = app.add_subcommand("eval-ppl", "per-language perplexity");
    ev->add_option("--model", ev_model, "model container")->required();
    ev->add_option("--manifest", ev_manifest, "evaluation manifest (n-samples = max windows, 0 = all)")->required();
    ev->add_option("--masks", ev_masks, "optional mask container applied before evaluation");
    ev->add_option("--window", ev_window, "tokens per evaluation window")->capture_default_str();
    ev->add_option("--out", ev_out, "CSV output path");

    // inspect
    std::vector<std::string> in_paths;
    bool                     in_csv = false;
    auto *                   in     = app.add_subcommand("inspect", "dump model, statistics or mask containers");
    in->add_option("paths", in_paths, "containers")->required();
    in->add_flag("--csv", in_csv, "print plans as CSV");

    // sweep
    SweepArgs  sw;
    PruneFlags sw_flags;
    auto *     swc = app.add_subcommand("sweep", "sparsity-ratio sweep with per-language perplexity CSV");
    swc->add_option("--model", sw.model, "model container")->required();
    swc->add_option("--stats", sw.stats, "statistics container");
    swc->add_option("--manifest", sw.manifest, "calibration manifest (used when statistics must be (re)computed)");
    swc->add_option("--eval-manifest", sw.eval_manifest, "evaluation manifest")->required();
    swc->add_option("--ratios", sw.ratios, "lo:hi:step or comma list")->capture_default_str();
    swc->add_flag("--grid", sw.grid, "cross with the lambda/eps/gamma/CWL-block grid");
    swc->add_option("--seed", sw.seed, "calibration seed")->capture_default_str();
    swc->add_option("--window", sw.window, "calibration window")->capture_default_str();
    swc->add_option("--eval-window", sw.eval_window, "evaluation window")->capture_default_str();
    swc->add_option("--out", sw.out, "CSV output path");
    sw_flags.add_to(swc);

    // make-toy
    std::string   toy_out;
    std::uint64_t toy_seed   = 0;
    std::size_t   toy_layers = 2, toy_dmodel = 32, toy_heads = 4, toy_dff = 64;
    auto *        toy        = app.add_subcommand("make-toy", "write a random byte-level model");
    toy->add_option("--out", toy_out, "output model container")->required();
    toy->add_option("--seed", toy_seed)->capture_default_str();
    toy->add_option("--layers", toy_layers)->capture_default_str();
    toy->add_option("--d-model", toy_dmodel)->capture_default_str();
    toy->add_option("--heads", toy_heads)->capture_default_str();
    toy->add_option("--d-ff", toy_dff)->capture_default_str();

    std::vector<std::string> args;
    try {
        args = expand_config(std::vector<std::string>(argv, argv + argc));
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    std::vector<const char *> cargs;
    for (const auto & a : args) {
        cargs.push_back(a.c_str());
    }
    CLI11_PARSE(app, static_cast<int>(cargs.size()), cargs.data());

    try {
        if (*cal) {
            return cmd_calibrate(cal_model, cal_manifest, cal_out, cal_opt);
        }
        if (*pr) {
            return cmd_prune(pr_model, pr_stats, pr_flags, pr_out);
        }
        if (*ev) {
            return cmd_eval_ppl(ev_model, ev_manifest, ev_masks, ev_window, ev_out);
        }
        if (*in) {
            return cmd_inspect(in_paths, in_csv);
        }
        if (*swc) {
            return cmd_sweep(sw, sw_flags);
        }
        if (*toy) {
            return cmd_make_toy(toy_out, toy_seed, toy_layers, toy_dmodel, toy_heads, toy_dff);
        }
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
