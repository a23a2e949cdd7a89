// SPDX-License-Identifier: Apache-2.0
//
// Single-sequence forward pass of a Llama-style decoder with activation
// capture at the four linear-input sites of every block, plus perplexity.

#pragma once

#include "mlprune/core.hpp"
#include "mlprune/mask.hpp"
#include "mlprune/weights.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mlprune {

using TokenId = std::int32_t;

inline constexpr std::size_t kDefaultMaxSequence = 2048;

struct TokenBatch {
    std::vector<TokenId> tokens;
    std::string          language;
};

struct SiteActivations {
    SiteId  site;
    MatrixF matrix; // tokens x features
};

// One token per UTF-8 byte.
inline TokenBatch byte_tokenize(std::string_view text, std::string language = {}) {
    TokenBatch b;
    b.language = std::move(language);
    b.tokens.reserve(text.size());
    for (char ch : text) {
        b.tokens.push_back(static_cast<TokenId>(static_cast<unsigned char>(ch)));
    }
    return b;
}

using CaptureSink = std::function<void(const SiteId &, MatrixView<const float>)>;

struct ForwardOptions {
    const MaskSet * mask    = nullptr;
    bool            collect = false; // keep captures in the result
    CaptureSink     sink;            // streamed captures, called in site order
    std::size_t     max_sequence = kDefaultMaxSequence;
};

struct ForwardResult {
    MatrixF                      logits; // tokens x vocab
    std::vector<SiteActivations> captures;
};

namespace detail {

// y = x W^T with W stored [out, in]; f64 accumulation.
inline MatrixF linear(const MatrixF & x, MatrixView<const float> w) {
    if (x.cols() != w.cols()) {
        throw Error("forward: shape mismatch in linear layer");
    }
    MatrixF y(x.rows(), w.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto xr = x.row(t);
        for (std::size_t o = 0; o < w.rows(); ++o) {
            const auto wr  = w.row(o);
            double     acc = 0.0;
            for (std::size_t i = 0; i < xr.size(); ++i) {
                acc += static_cast<double>(xr[i]) * static_cast<double>(wr[i]);
            }
            y(t, o) = static_cast<float>(acc);
        }
    }
    return y;
}

inline MatrixF rms_norm(const MatrixF & x, std::span<const float> gain, double eps) {
    MatrixF y(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto xr = x.row(t);
        double     ss = 0.0;
        for (float v : xr) {
            ss += static_cast<double>(v) * v;
        }
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(xr.size()) + eps);
        for (std::size_t i = 0; i < xr.size(); ++i) {
            y(t, i) = static_cast<float>(static_cast<double>(xr[i]) * inv * gain[i]);
        }
    }
    return y;
}

// Rotary embedding, rotate-half convention: feature i pairs with i + d_head/2.
inline void apply_rope(MatrixF & x, std::size_t n_heads, std::size_t d_head, double theta) {
    const std::size_t half = d_head / 2;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            float * base = &x(t, h * d_head);
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
                const double ang  = static_cast<double>(t) * freq;
                const double c = std::cos(ang), s = std::sin(ang);
                const double a = base[i], b = base[i + half];
                base[i]        = static_cast<float>(a * c - b * s);
                base[i + half] = static_cast<float>(b * c + a * s);
            }
        }
    }
}

inline MatrixF causal_attention(const MatrixF & q, const MatrixF & k, const MatrixF & v, std::size_t n_heads, std::size_t d_head) {
    const std::size_t   T = q.rows();
    MatrixF             out(T, n_heads * d_head);
    const double        scale = 1.0 / std::sqrt(static_cast<double>(d_head));
    std::vector<double> w(T);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * d_head;
        for (std::size_t t = 0; t < T; ++t) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                double dot = 0.0;
                for (std::size_t i = 0; i < d_head; ++i) {
                    dot += static_cast<double>(q(t, off + i)) * k(s, off + i);
                }
                w[s] = dot * scale;
                mx   = std::max(mx, w[s]);
            }
            double sum = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                w[s] = std::exp(w[s] - mx);
                sum += w[s];
            }
            for (std::size_t i = 0; i < d_head; ++i) {
                double acc = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    acc += w[s] * v(s, off + i);
                }
                out(t, off + i) = static_cast<float>(acc / sum);
            }
        }
    }
    return out;
}

inline void add_inplace(MatrixF & x, const MatrixF & y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        x.storage()[i] += y.storage()[i];
    }
}

} // namespace detail

inline ForwardResult forward(const WeightStore & weights, std::span<const TokenId> tokens, const ForwardOptions & opt = {}) {
    if (opt.mask) {
        ForwardOptions inner = opt;
        inner.mask           = nullptr;
        return forward(apply(weights, *opt.mask), tokens, inner);
    }

    const ModelGraph & g = weights.graph();
    const std::size_t  T = tokens.size();
    if (T > opt.max_sequence) {
        throw Error("forward: sequence length " + std::to_string(T) + " exceeds maximum " + std::to_string(opt.max_sequence));
    }

    ForwardResult result;
    auto          capture = [&](SiteKind kind, std::size_t layer, const MatrixF & x) {
        const SiteId id{layer, kind};
        if (opt.sink) {
            opt.sink(id, x.view());
        }
        if (opt.collect) {
            result.captures.push_back({id, x});
        }
    };

    const auto embed = weights.matrix(ModelGraph::embed_name());
    MatrixF    x(T, g.d_model);
    for (std::size_t t = 0; t < T; ++t) {
        if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= g.vocab_size) {
            throw Error("forward: token id " + std::to_string(tokens[t]) + " out of range");
        }
        const auto src = embed.row(static_cast<std::size_t>(tokens[t]));
        std::copy(src.begin(), src.end(), x.row(t).begin());
    }

    for (std::size_t l = 0; l < g.n_layers; ++l) {
        auto lin = [&](Proj p) { return weights.matrix(ModelGraph::linear_name(l, p)); };

        const MatrixF h = detail::rms_norm(x, weights.vector(ModelGraph::attn_norm_name(l)), g.rms_norm_eps);
        capture(SiteKind::AttnIn, l, h);
        MatrixF q = detail::linear(h, lin(Proj::Q));
        MatrixF k = detail::linear(h, lin(Proj::K));
        MatrixF v = detail::linear(h, lin(Proj::V));
        detail::apply_rope(q, g.n_heads, g.d_head, g.rope_theta);
        detail::apply_rope(k, g.n_heads, g.d_head, g.rope_theta);
        const MatrixF attn = detail::causal_attention(q, k, v, g.n_heads, g.d_head);
        capture(SiteKind::OIn, l, attn);
        detail::add_inplace(x, detail::linear(attn, lin(Proj::O)));

        const MatrixF h2 = detail::rms_norm(x, weights.vector(ModelGraph::mlp_norm_name(l)), g.rms_norm_eps);
        capture(SiteKind::MlpIn, l, h2);
        const MatrixF gate = detail::linear(h2, lin(Proj::Gate));
        const MatrixF up   = detail::linear(h2, lin(Proj::Up));
        MatrixF       act(T, g.d_ff);
        for (std::size_t i = 0; i < act.size(); ++i) {
            const double gv   = gate.storage()[i];
            act.storage()[i] = static_cast<float>(gv / (1.0 + std::exp(-gv)) * up.storage()[i]);
        }
        capture(SiteKind::DownIn, l, act);
        detail::add_inplace(x, detail::linear(act, lin(Proj::Down)));
    }

    const MatrixF hf = detail::rms_norm(x, weights.vector(ModelGraph::final_norm_name()), g.rms_norm_eps);
    result.logits    = detail::linear(hf, g.tie_embeddings ? embed : weights.matrix(ModelGraph::lm_head_name()));
    return result;
}

struct NllSum {
    double      nll   = 0.0;
    std::size_t count = 0;
};

// Summed next-token negative log-likelihood: row t of the logits predicts
// token t + 1.
inline NllSum next_token_nll(MatrixView<const float> logits, std::span<const TokenId> tokens) {
    if (logits.rows() != tokens.size()) {
        throw Error("nll: logits rows do not match token count");
    }
    NllSum s;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        const auto row = logits.row(t);
        double     mx  = -std::numeric_limits<double>::infinity();
        for (float v : row) {
            mx = std::max(mx, static_cast<double>(v));
        }
        double sum = 0.0;
        for (float v : row) {
            sum += std::exp(static_cast<double>(v) - mx);
        }
        const auto target = static_cast<std::size_t>(tokens[t + 1]);
        s.nll += std::log(sum) + mx - static_cast<double>(row[target]);
        s.count += 1;
    }
    return s;
}

// exp of the mean next-token NLL pooled over every predicted position.
inline double perplexity(const WeightStore & weights, std::span<const TokenBatch> corpus, const MaskSet * mask = nullptr) {
    if (corpus.empty()) {
        throw Error("perplexity: empty corpus");
    }
    for (const auto & b : corpus) {
        if (b.tokens.size() < 2) {
            throw Error("perplexity: every sequence needs at least 2 tokens");
        }
    }
    const WeightStore  masked = mask ? apply(weights, *mask) : WeightStore{};
    const WeightStore & w     = mask ? masked : weights;

    NllSum total;
    for (const auto & b : corpus) {
        const auto r = forward(w, b.tokens);
        const auto s = next_token_nll(r.logits, b.tokens);
        total.nll += s.nll;
        total.count += s.count;
    }
    return std::exp(total.nll / static_cast<double>(total.count));
}

} // namespace mlprune
