// SPDX-License-Identifier: Apache-2.0
//
// Llama-style decoder topology and the weight store bound to it.
// Tensor names follow the Hugging Face Llama layout so exported checkpoints
// load without renaming.

#pragma once

#include "mlprune/container.hpp"
#include "mlprune/core.hpp"

#include <array>
#include <compare>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

namespace mlprune {

// Input sites of the linear sublayers in one block. q/k/v share attn-in,
// gate/up share mlp-in.
enum class SiteKind { AttnIn, OIn, MlpIn, DownIn };

inline constexpr std::array<SiteKind, 4> kSiteKinds = {SiteKind::AttnIn, SiteKind::OIn, SiteKind::MlpIn, SiteKind::DownIn};

inline const char * site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::AttnIn: return "attn_in";
        case SiteKind::OIn:    return "o_in";
        case SiteKind::MlpIn:  return "mlp_in";
        case SiteKind::DownIn: return "down_in";
    }
    return "?";
}

struct SiteId {
    std::size_t layer = 0;
    SiteKind    kind  = SiteKind::AttnIn;

    std::string name() const { return "layers." + std::to_string(layer) + "." + site_kind_name(kind); }

    static SiteId parse(const std::string & s) {
        unsigned long layer = 0;
        char          kind[16] = {};
        if (std::sscanf(s.c_str(), "layers.%lu.%15s", &layer, kind) != 2) {
            throw Error("invalid site name '" + s + "'");
        }
        for (auto k : kSiteKinds) {
            if (std::string(kind) == site_kind_name(k)) {
                return {layer, k};
            }
        }
        throw Error("invalid site name '" + s + "'");
    }

    auto operator<=>(const SiteId &) const = default;
};

enum class Proj { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<Proj, 7> kProjections = {Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down};

inline SiteKind input_site(Proj p) {
    switch (p) {
        case Proj::Q:
        case Proj::K:
        case Proj::V:    return SiteKind::AttnIn;
        case Proj::O:    return SiteKind::OIn;
        case Proj::Gate:
        case Proj::Up:   return SiteKind::MlpIn;
        case Proj::Down: return SiteKind::DownIn;
    }
    return SiteKind::AttnIn;
}

struct LinearSpec {
    std::string name;
    std::size_t layer;
    Proj        proj;
    std::size_t rows; // C_out
    std::size_t cols; // C_in

    SiteId site() const { return {layer, input_site(proj)}; }
};

struct ModelGraph {
    std::size_t vocab_size     = 256;
    std::size_t d_model        = 0;
    std::size_t n_layers       = 0;
    std::size_t n_heads        = 0;
    std::size_t d_head         = 0;
    std::size_t d_ff           = 0;
    bool        tie_embeddings = false;
    double      rms_norm_eps   = 1e-5;
    double      rope_theta     = 10000.0;

    bool operator==(const ModelGraph &) const = default;

    static std::string linear_name(std::size_t layer, Proj p) {
        const std::string base = "model.layers." + std::to_string(layer) + ".";
        switch (p) {
            case Proj::Q:    return base + "self_attn.q_proj.weight";
            case Proj::K:    return base + "self_attn.k_proj.weight";
            case Proj::V:    return base + "self_attn.v_proj.weight";
            case Proj::O:    return base + "self_attn.o_proj.weight";
            case Proj::Gate: return base + "mlp.gate_proj.weight";
            case Proj::Up:   return base + "mlp.up_proj.weight";
            case Proj::Down: return base + "mlp.down_proj.weight";
        }
        return {};
    }
    static std::string attn_norm_name(std::size_t layer) { return "model.layers." + std::to_string(layer) + ".input_layernorm.weight"; }
    static std::string mlp_norm_name(std::size_t layer) { return "model.layers." + std::to_string(layer) + ".post_attention_layernorm.weight"; }
    static std::string embed_name() { return "model.embed_tokens.weight"; }
    static std::string final_norm_name() { return "model.norm.weight"; }
    static std::string lm_head_name() { return "lm_head.weight"; }

    std::size_t site_width(SiteKind k) const {
        switch (k) {
            case SiteKind::AttnIn:
            case SiteKind::OIn:
            case SiteKind::MlpIn:  return d_model;
            case SiteKind::DownIn: return d_ff;
        }
        return 0;
    }

    std::vector<SiteId> sites() const {
        std::vector<SiteId> out;
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (auto k : kSiteKinds) {
                out.push_back({l, k});
            }
        }
        return out;
    }

    // Prunable matrices in block order; embeddings, norms and the LM head are
    // never pruned.
    std::vector<LinearSpec> linears() const {
        std::vector<LinearSpec> out;
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (auto p : kProjections) {
                std::size_t rows = d_model, cols = d_model;
                if (p == Proj::Gate || p == Proj::Up) {
                    rows = d_ff;
                } else if (p == Proj::Down) {
                    cols = d_ff;
                }
                out.push_back({linear_name(l, p), l, p, rows, cols});
            }
        }
        return out;
    }

    std::map<std::string, std::vector<std::size_t>> expected_shapes() const {
        std::map<std::string, std::vector<std::size_t>> shapes;
        shapes[embed_name()]      = {vocab_size, d_model};
        shapes[final_norm_name()] = {d_model};
        if (!tie_embeddings) {
            shapes[lm_head_name()] = {vocab_size, d_model};
        }
        for (std::size_t l = 0; l < n_layers; ++l) {
            shapes[attn_norm_name(l)] = {d_model};
            shapes[mlp_norm_name(l)]  = {d_model};
        }
        for (const auto & lin : linears()) {
            shapes[lin.name] = {lin.rows, lin.cols};
        }
        return shapes;
    }

    void validate() const {
        if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_head == 0 || d_ff == 0) {
            throw Error("model graph: all dimensions must be positive");
        }
        if (n_heads * d_head != d_model) {
            throw Error("model graph: n_heads * d_head must equal d_model");
        }
        if (d_head % 2 != 0) {
            throw Error("model graph: d_head must be even for rotary embeddings");
        }
    }

    std::map<std::string, std::string> to_metadata() const {
        char buf[64];
        std::map<std::string, std::string> m;
        m["vocab_size"]     = std::to_string(vocab_size);
        m["d_model"]        = std::to_string(d_model);
        m["n_layers"]       = std::to_string(n_layers);
        m["n_heads"]        = std::to_string(n_heads);
        m["d_head"]         = std::to_string(d_head);
        m["d_ff"]           = std::to_string(d_ff);
        m["tie_embeddings"] = tie_embeddings ? "true" : "false";
        std::snprintf(buf, sizeof(buf), "%.17g", rms_norm_eps);
        m["rms_norm_eps"] = buf;
        std::snprintf(buf, sizeof(buf), "%.17g", rope_theta);
        m["rope_theta"] = buf;
        return m;
    }

    static ModelGraph from_metadata(const std::map<std::string, std::string> & m) {
        auto get = [&](const char * key) -> const std::string & {
            auto it = m.find(key);
            if (it == m.end()) {
                throw Error(std::string("model graph: missing metadata key '") + key + "'");
            }
            return it->second;
        };
        auto count = [&](const char * key) -> std::size_t {
            const auto & s = get(key);
            std::size_t  pos = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(s, &pos);
            } catch (const std::exception &) {
                pos = 0;
            }
            if (pos != s.size() || s.empty() || s[0] == '-') {
                throw Error(std::string("model graph: '") + key + "' is not a decimal count: " + s);
            }
            return static_cast<std::size_t>(v);
        };
        auto real = [&](const char * key, double fallback) {
            auto it = m.find(key);
            return it == m.end() ? fallback : std::stod(it->second);
        };

        ModelGraph g;
        g.vocab_size = count("vocab_size");
        g.d_model    = count("d_model");
        g.n_layers   = count("n_layers");
        g.n_heads    = count("n_heads");
        g.d_head     = count("d_head");
        g.d_ff       = count("d_ff");
        const auto & tie = get("tie_embeddings");
        if (tie != "true" && tie != "false") {
            throw Error("model graph: tie_embeddings must be \"true\" or \"false\"");
        }
        g.tie_embeddings = tie == "true";
        g.rms_norm_eps   = real("rms_norm_eps", 1e-5);
        g.rope_theta     = real("rope_theta", 10000.0);
        g.validate();
        return g;
    }
};

// Named weights bound to a graph. Every tensor the graph expects is present
// with the expected shape.
class WeightStore {
public:
    WeightStore() = default;

    WeightStore(ModelGraph graph, std::map<std::string, TensorRecord> tensors, std::map<std::string, std::string> extra_meta = {})
        : graph_(graph), tensors_(std::move(tensors)), extra_meta_(std::move(extra_meta)) {
        validate();
    }

    static WeightStore from_container(const Container & c) {
        ModelGraph                          g = ModelGraph::from_metadata(c.metadata);
        std::map<std::string, TensorRecord> tensors;
        for (const auto & r : c.records) {
            tensors.emplace(r.name, r);
        }
        auto extra = c.metadata;
        for (const auto & [k, _] : g.to_metadata()) {
            extra.erase(k);
        }
        return WeightStore(g, std::move(tensors), std::move(extra));
    }

    Container to_container() const {
        Container c;
        c.metadata = extra_meta_;
        for (const auto & [k, v] : graph_.to_metadata()) {
            c.metadata[k] = v;
        }
        for (const auto & [name, rec] : tensors_) {
            c.records.push_back(rec);
        }
        return c;
    }

    const ModelGraph & graph() const { return graph_; }

    const TensorRecord & tensor(const std::string & name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw Error("weights: missing tensor '" + name + "'");
        }
        return it->second;
    }

    MatrixView<const float> matrix(const std::string & name) const {
        const auto & t = tensor(name);
        if (t.shape.size() != 2) {
            throw Error("weights: tensor '" + name + "' is not 2-D");
        }
        return {t.data.data(), t.shape[0], t.shape[1]};
    }

    std::span<const float> vector(const std::string & name) const { return tensor(name).data; }

    std::span<float> mutable_data(const std::string & name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw Error("weights: missing tensor '" + name + "'");
        }
        return it->second.data;
    }

    const std::map<std::string, TensorRecord> & tensors() const { return tensors_; }

    bool operator==(const WeightStore &) const = default;

private:
    void validate() const {
        graph_.validate();
        for (const auto & [name, shape] : graph_.expected_shapes()) {
            auto it = tensors_.find(name);
            if (it == tensors_.end()) {
                throw Error("weights: missing tensor '" + name + "'");
            }
            if (it->second.shape != shape) {
                throw Error("weights: tensor '" + name + "' has unexpected shape");
            }
            for (float v : it->second.data) {
                if (!std::isfinite(v)) {
                    throw Error("weights: tensor '" + name + "' has non-finite entries");
                }
            }
        }
    }

    ModelGraph                          graph_;
    std::map<std::string, TensorRecord> tensors_;
    std::map<std::string, std::string>  extra_meta_;
};

// Random Llama-style model for tests and demos.
inline WeightStore make_random_model(const ModelGraph & g, std::uint64_t seed, double stddev = 0.02) {
    g.validate();
    Rng                                 rng(seed);
    std::map<std::string, TensorRecord> tensors;
    for (const auto & [name, shape] : g.expected_shapes()) {
        TensorRecord rec{name, shape, {}};
        rec.data.resize(rec.numel());
        const bool is_norm = shape.size() == 1;
        for (auto & v : rec.data) {
            v = is_norm ? static_cast<float>(1.0 + 0.1 * rng.normal()) : static_cast<float>(stddev * rng.normal());
        }
        tensors.emplace(name, std::move(rec));
    }
    return WeightStore(g, std::move(tensors));
}

} // namespace mlprune
