#pragma once

// Small decoder-only transformer: pre-norm blocks, learned positional
// embeddings, per-layer hidden-state tracing, and forward passes that can
// substitute a chosen hidden vector at a given (layer, position).
// "Layer output" h^l is the residual-stream value after block l; h^0 is the
// embedded input.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fable/optim.hpp"
#include "fable/tensor.hpp"
#include "fable/tokenizer.hpp"

namespace fable {

struct LMConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 47;
    int max_seq_len = 256;
    uint64_t seed = 1;

    void validate() const {
        if (n_layers < 3) throw ContractError("LMConfig: n_layers must be >= 3");
        if (d_model % n_heads != 0) throw ContractError("LMConfig: d_model not divisible by n_heads");
    }
};

// (L_f, L_h) split: layers 1..L_f form the fine-grained key generator,
// L_f+1..L_h the holistic key generator, L_h+1..N the value generator.
struct LayerPartition {
    int l_fine = 6;
    int l_hol = 7;

    void validate(int n_layers) const {
        if (!(1 <= l_fine && l_fine < l_hol && l_hol < n_layers))
            throw ContractError("LayerPartition: requires 1 <= L_f < L_h < N, got L_f=" +
                                std::to_string(l_fine) + " L_h=" + std::to_string(l_hol) +
                                " N=" + std::to_string(n_layers));
    }
};

struct BlockParams {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;

    std::vector<Tensor> all() const {
        return {ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2};
    }
};

struct TransformerLM {
    LMConfig cfg;
    Tensor tok_emb, pos_emb;
    std::vector<BlockParams> blocks;
    Tensor lnf_g, lnf_b, w_out;

    static TransformerLM init(const LMConfig& cfg) {
        cfg.validate();
        TransformerLM m;
        m.cfg = cfg;
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> dist(0.0, 0.02);
        auto randmat = [&](int r, int c) {
            std::vector<double> v(static_cast<size_t>(r) * c);
            for (auto& x : v) x = dist(rng);
            return Tensor::leaf({r, c}, std::move(v), true);
        };
        auto ones = [&](int d) {
            return Tensor::leaf({d}, std::vector<double>(static_cast<size_t>(d), 1.0), true);
        };
        auto zeros = [&](int d) { return Tensor::zeros({d}, true); };
        m.tok_emb = randmat(cfg.vocab_size, cfg.d_model);
        m.pos_emb = randmat(cfg.max_seq_len, cfg.d_model);
        for (int l = 0; l < cfg.n_layers; ++l) {
            BlockParams b;
            b.ln1_g = ones(cfg.d_model);
            b.ln1_b = zeros(cfg.d_model);
            b.wq = randmat(cfg.d_model, cfg.d_model);
            b.wk = randmat(cfg.d_model, cfg.d_model);
            b.wv = randmat(cfg.d_model, cfg.d_model);
            b.wo = randmat(cfg.d_model, cfg.d_model);
            b.ln2_g = ones(cfg.d_model);
            b.ln2_b = zeros(cfg.d_model);
            b.w1 = randmat(cfg.d_model, cfg.d_ff);
            b.b1 = zeros(cfg.d_ff);
            b.w2 = randmat(cfg.d_ff, cfg.d_model);
            b.b2 = zeros(cfg.d_model);
            m.blocks.push_back(std::move(b));
        }
        m.lnf_g = ones(cfg.d_model);
        m.lnf_b = zeros(cfg.d_model);
        m.w_out = randmat(cfg.d_model, cfg.vocab_size);
        return m;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps = {tok_emb, pos_emb};
        for (const auto& b : blocks)
            for (const auto& t : b.all()) ps.push_back(t);
        ps.push_back(lnf_g);
        ps.push_back(lnf_b);
        ps.push_back(w_out);
        return ps;
    }

    // Parameters of block l, 1-based.
    std::vector<Tensor> layer_parameters(int l) const {
        if (l < 1 || l > cfg.n_layers) throw ContractError("layer_parameters: layer out of range");
        return blocks[static_cast<size_t>(l - 1)].all();
    }

    TransformerLM clone() const {
        TransformerLM m;
        m.cfg = cfg;
        auto copy = [](const Tensor& t) {
            return Tensor::leaf(t.shape(), t.values(), t.n->requires_grad);
        };
        m.tok_emb = copy(tok_emb);
        m.pos_emb = copy(pos_emb);
        for (const auto& b : blocks) {
            BlockParams nb;
            nb.ln1_g = copy(b.ln1_g);
            nb.ln1_b = copy(b.ln1_b);
            nb.wq = copy(b.wq);
            nb.wk = copy(b.wk);
            nb.wv = copy(b.wv);
            nb.wo = copy(b.wo);
            nb.ln2_g = copy(b.ln2_g);
            nb.ln2_b = copy(b.ln2_b);
            nb.w1 = copy(b.w1);
            nb.b1 = copy(b.b1);
            nb.w2 = copy(b.w2);
            nb.b2 = copy(b.b2);
            m.blocks.push_back(std::move(nb));
        }
        m.lnf_g = copy(lnf_g);
        m.lnf_b = copy(lnf_b);
        m.w_out = copy(w_out);
        return m;
    }
};

// Additive causal mask: 0 on/below the diagonal, a large negative above.
inline Tensor causal_mask(int n) {
    std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) v[static_cast<size_t>(i) * n + j] = -1e30;
    return Tensor::leaf({n, n}, std::move(v));
}

inline Tensor block_forward(const BlockParams& b, const Tensor& x, int n_heads,
                            const Tensor& mask) {
    const int n = x.dim(0), d = x.dim(1);
    const int dh = d / n_heads;
    Tensor a = layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor q = matmul(a, b.wq);
    Tensor k = matmul(a, b.wk);
    Tensor v = matmul(a, b.wv);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, dh);
        Tensor kh = slice(k, 1, h * dh, dh);
        Tensor vh = slice(v, 1, h * dh, dh);
        Tensor scores = add(scale(matmul(qh, kh, false, true), 1.0 / std::sqrt(double(dh))), mask);
        heads.push_back(matmul(softmax_last(scores), vh));
    }
    Tensor attn = matmul(concat(heads, 1), b.wo);
    Tensor x1 = add(x, attn);
    Tensor mlp_in = layer_norm(x1, b.ln2_g, b.ln2_b);
    Tensor hidden = gelu(add(matmul(mlp_in, b.w1), b.b1));
    Tensor mlp_out = add(matmul(hidden, b.w2), b.b2);
    (void)n;
    return add(x1, mlp_out);
}

inline Tensor embed_tokens(const TransformerLM& m, const std::vector<int>& tokens) {
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > m.cfg.max_seq_len)
        throw ContractError("forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(m.cfg.max_seq_len));
    Tensor te = embedding(m.tok_emb, tokens);
    Tensor pe = slice(m.pos_emb, 0, 0, static_cast<int>(tokens.size()));
    return add(te, pe);
}

// Replaces row `position` of a (n, d) hidden state with `vec` (rank-1 d).
inline Tensor substitute_row(const Tensor& h, int position, const Tensor& vec) {
    const int n = h.dim(0), d = h.dim(1);
    if (vec.rank() != 1 || vec.dim(0) != d)
        throw ShapeError("substitution vector has shape " + shape_str(vec.shape()) +
                         ", expected (" + std::to_string(d) + ")");
    if (position < 0 || position >= n) throw ContractError("substitution position out of range");
    // concat needs rank-2 parts; wrap vec as a single-row matrix sharing the graph
    std::vector<Tensor> parts;
    Tensor vr = Tensor(detail::make_op(
        "slice", {1, d}, {vec.n},
        [src = vec.n, d](Node& out) { std::copy_n(src->v.data(), d, out.v.data()); },
        [src = vec.n, d](Node& out) {
            if (!src->requires_grad) return;
            src->ensure_grad();
            for (int j = 0; j < d; ++j) src->g[static_cast<size_t>(j)] += out.g[static_cast<size_t>(j)];
        }));
    if (position > 0) parts.push_back(slice(h, 0, 0, position));
    parts.push_back(vr);
    if (position + 1 < n) parts.push_back(slice(h, 0, position + 1, n - position - 1));
    return concat(parts, 0);
}

struct SubstitutionSpec {
    int layer = 0;     // 1-based block index in [1, N]
    int position = 0;  // 0-based token position
    Tensor vec;        // rank-1 (d_model)
};

// Hidden states h^0..h^N; an optional substitution overwrites (layer,
// position) before layer+1 consumes it.
inline std::vector<Tensor> forward_layers(const TransformerLM& m, const std::vector<int>& tokens,
                                          const SubstitutionSpec* sub = nullptr) {
    if (sub && (sub->layer < 1 || sub->layer > m.cfg.n_layers))
        throw ContractError("substitution layer out of range");
    std::vector<Tensor> hs;
    hs.reserve(static_cast<size_t>(m.cfg.n_layers) + 1);
    Tensor h = embed_tokens(m, tokens);
    hs.push_back(h);
    Tensor mask = causal_mask(static_cast<int>(tokens.size()));
    for (int l = 1; l <= m.cfg.n_layers; ++l) {
        h = block_forward(m.blocks[static_cast<size_t>(l - 1)], h, m.cfg.n_heads, mask);
        if (sub && sub->layer == l) h = substitute_row(h, sub->position, sub->vec);
        hs.push_back(h);
    }
    return hs;
}

inline Tensor logits_from_hidden(const TransformerLM& m, const Tensor& h_last) {
    return matmul(layer_norm(h_last, m.lnf_g, m.lnf_b), m.w_out);
}

struct HiddenTrace {
    std::vector<int> tokens;
    int n_layers = 0;
    int d_model = 0;
    std::vector<std::vector<double>> layers;  // (N+1) entries of n*d values
    std::vector<double> logits;               // n * vocab

    std::vector<double> at(int layer, int position) const {
        const auto& lay = layers[static_cast<size_t>(layer)];
        return {lay.begin() + static_cast<long>(position) * d_model,
                lay.begin() + static_cast<long>(position + 1) * d_model};
    }
    int n_tokens() const { return static_cast<int>(tokens.size()); }
};

inline HiddenTrace forward_with_trace(const TransformerLM& m, const std::vector<int>& tokens) {
    auto hs = forward_layers(m, tokens);
    HiddenTrace t;
    t.tokens = tokens;
    t.n_layers = m.cfg.n_layers;
    t.d_model = m.cfg.d_model;
    for (auto& h : hs) t.layers.push_back(h.values());
    t.logits = logits_from_hidden(m, hs.back()).values();
    return t;
}

inline std::pair<std::vector<double>, HiddenTrace> forward_with_substitution(
    const TransformerLM& m, const std::vector<int>& tokens, int layer, int position,
    const std::vector<double>& vec) {
    SubstitutionSpec sub{layer, position, Tensor::leaf({m.cfg.d_model}, vec)};
    auto hs = forward_layers(m, tokens, &sub);
    HiddenTrace t;
    t.tokens = tokens;
    t.n_layers = m.cfg.n_layers;
    t.d_model = m.cfg.d_model;
    for (auto& h : hs) t.layers.push_back(h.values());
    t.logits = logits_from_hidden(m, hs.back()).values();
    return {t.logits, t};
}

struct KeyBundle {
    std::vector<double> k_fine, k_hol, v;
};

// Pure projection of the trace at the last token position.
inline KeyBundle extract_keys(const HiddenTrace& trace, const LayerPartition& p) {
    p.validate(trace.n_layers);
    const int n = trace.n_tokens() - 1;
    return KeyBundle{trace.at(p.l_fine, n), trace.at(p.l_hol, n), trace.at(trace.n_layers, n)};
}

// Teacher-forced NLL of `target` after `prompt`, summed over target
// positions. The optional substitution is applied at the prompt's last
// token position; a single full-sequence causal forward realizes its
// re-application for every target-token evaluation.
inline Tensor sequence_nll_graph(const TransformerLM& m, const std::vector<int>& prompt,
                                 const std::vector<int>& target,
                                 const SubstitutionSpec* sub = nullptr) {
    if (target.empty()) throw ContractError("sequence_nll: empty target");
    if (prompt.empty()) throw ContractError("sequence_nll: empty prompt");
    std::vector<int> toks = prompt;
    toks.insert(toks.end(), target.begin(), target.end());
    auto hs = forward_layers(m, toks, sub);
    Tensor logits = logits_from_hidden(m, hs.back());
    const int p = static_cast<int>(prompt.size());
    Tensor rows = slice(logits, 0, p - 1, static_cast<int>(target.size()));
    return nll_logits(rows, target);
}

inline double sequence_nll(const TransformerLM& m, const std::vector<int>& prompt,
                           const std::vector<int>& target,
                           const std::optional<std::pair<int, std::vector<double>>>& substitution =
                               std::nullopt) {
    if (substitution) {
        SubstitutionSpec sub{substitution->first, static_cast<int>(prompt.size()) - 1,
                             Tensor::leaf({m.cfg.d_model}, substitution->second)};
        return sequence_nll_graph(m, prompt, target, &sub).item();
    }
    return sequence_nll_graph(m, prompt, target).item();
}

// Reference greedy decoding through the recorded graph; O(n) forwards per
// token, kept as the oracle for the cached decoder below.
inline std::vector<int> generate_ids_reference(const TransformerLM& m,
                                               const std::vector<int>& prompt,
                                               int max_new_tokens) {
    std::vector<int> toks = prompt;
    std::vector<int> out;
    for (int step = 0; step < max_new_tokens; ++step) {
        if (static_cast<int>(toks.size()) >= m.cfg.max_seq_len) break;
        auto hs = forward_layers(m, toks);
        Tensor logits = logits_from_hidden(m, hs.back());
        const int vocab = m.cfg.vocab_size;
        const double* last = logits.values().data() +
                             static_cast<size_t>(toks.size() - 1) * vocab;
        int best = 0;
        for (int j = 1; j < vocab; ++j)
            if (last[j] > last[best]) best = j;
        if (best == CharTokenizer::kEosId) break;
        out.push_back(best);
        toks.push_back(best);
    }
    return out;
}

namespace detail {

// y = a(1,d_in) @ w(d_in,d_out), accumulation order matching mm_kernel
inline void matvec(const double* a, const double* w, double* y, int d_in, int d_out) {
    std::fill(y, y + d_out, 0.0);
    for (int k = 0; k < d_in; ++k) {
        const double av = a[k];
        const double* wr = w + static_cast<size_t>(k) * d_out;
        for (int j = 0; j < d_out; ++j) y[j] += av * wr[j];
    }
}

inline void ln_row(const double* x, const double* g, const double* b, double* y, int d,
                   double eps = 1e-5) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) y[j] = (x[j] - mu) * inv * g[j] + b[j];
}

}  // namespace detail

// Per-layer key/value cache for incremental decoding. Each processed
// position appends one row per layer; earlier rows never change under
// causal attention.
struct DecodeState {
    std::vector<std::vector<double>> k_cache, v_cache;  // per layer, n * d_model
    int n = 0;
};

// Runs one token through the model, extending the cache, and returns the
// logits at its position. Matches the graph forward bit for bit.
inline std::vector<double> decode_step(const TransformerLM& m, DecodeState& st, int token) {
    const int d = m.cfg.d_model, H = m.cfg.n_heads, dh = d / H;
    if (token < 0 || token >= m.cfg.vocab_size) throw ContractError("decode_step: bad token id");
    if (st.n >= m.cfg.max_seq_len) throw ContractError("decode_step: sequence cap reached");
    if (st.k_cache.empty()) {
        st.k_cache.resize(static_cast<size_t>(m.cfg.n_layers));
        st.v_cache.resize(static_cast<size_t>(m.cfg.n_layers));
    }
    const int p = st.n;
    std::vector<double> x(static_cast<size_t>(d)), a(static_cast<size_t>(d));
    std::vector<double> q(static_cast<size_t>(d)), k(static_cast<size_t>(d)),
        v(static_cast<size_t>(d)), att(static_cast<size_t>(d)), proj(static_cast<size_t>(d));
    std::vector<double> hid(static_cast<size_t>(m.cfg.d_ff)), mo(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = m.tok_emb.values()[static_cast<size_t>(token) * d + j] +
                                    m.pos_emb.values()[static_cast<size_t>(p) * d + j];
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        const auto& b = m.blocks[static_cast<size_t>(l)];
        detail::ln_row(x.data(), b.ln1_g.values().data(), b.ln1_b.values().data(), a.data(), d);
        detail::matvec(a.data(), b.wq.values().data(), q.data(), d, d);
        detail::matvec(a.data(), b.wk.values().data(), k.data(), d, d);
        detail::matvec(a.data(), b.wv.values().data(), v.data(), d, d);
        auto& kc = st.k_cache[static_cast<size_t>(l)];
        auto& vc = st.v_cache[static_cast<size_t>(l)];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> scores(static_cast<size_t>(p) + 1);
        for (int h = 0; h < H; ++h) {
            const double* qh = q.data() + h * dh;
            for (int i = 0; i <= p; ++i) {
                const double* kh = kc.data() + static_cast<size_t>(i) * d + h * dh;
                double s = 0.0;
                for (int j = 0; j < dh; ++j) s += qh[j] * kh[j];
                scores[static_cast<size_t>(i)] = s * inv_sqrt;
            }
            double mx = scores[0];
            for (int i = 1; i <= p; ++i) mx = std::max(mx, scores[static_cast<size_t>(i)]);
            double z = 0.0;
            for (int i = 0; i <= p; ++i) {
                scores[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)] - mx);
                z += scores[static_cast<size_t>(i)];
            }
            double* oh = att.data() + h * dh;
            std::fill(oh, oh + dh, 0.0);
            for (int i = 0; i <= p; ++i) {
                const double w = scores[static_cast<size_t>(i)] / z;
                const double* vh = vc.data() + static_cast<size_t>(i) * d + h * dh;
                for (int j = 0; j < dh; ++j) oh[j] += w * vh[j];
            }
        }
        detail::matvec(att.data(), b.wo.values().data(), proj.data(), d, d);
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += proj[static_cast<size_t>(j)];
        detail::ln_row(x.data(), b.ln2_g.values().data(), b.ln2_b.values().data(), a.data(), d);
        detail::matvec(a.data(), b.w1.values().data(), hid.data(), d, m.cfg.d_ff);
        for (int j = 0; j < m.cfg.d_ff; ++j) {
            const double y = hid[static_cast<size_t>(j)] + b.b1.values()[static_cast<size_t>(j)];
            hid[static_cast<size_t>(j)] = 0.5 * y * (1.0 + std::erf(y / std::sqrt(2.0)));
        }
        detail::matvec(hid.data(), b.w2.values().data(), mo.data(), m.cfg.d_ff, d);
        for (int j = 0; j < d; ++j)
            x[static_cast<size_t>(j)] += mo[static_cast<size_t>(j)] + b.b2.values()[static_cast<size_t>(j)];
    }
    st.n += 1;
    detail::ln_row(x.data(), m.lnf_g.values().data(), m.lnf_b.values().data(), a.data(), d);
    std::vector<double> logits(static_cast<size_t>(m.cfg.vocab_size));
    detail::matvec(a.data(), m.w_out.values().data(), logits.data(), d, m.cfg.vocab_size);
    return logits;
}

// Greedy decoding via the incremental cache; stops at max_new_tokens or
// end-of-sequence. Produces the same tokens as the reference decoder.
inline std::vector<int> generate_ids(const TransformerLM& m, const std::vector<int>& prompt,
                                     int max_new_tokens) {
    if (prompt.empty()) throw ContractError("forward: empty token sequence");
    std::vector<int> out;
    if (max_new_tokens <= 0) return out;
    DecodeState st;
    std::vector<double> logits;
    if (static_cast<int>(prompt.size()) > m.cfg.max_seq_len)
        throw ContractError("forward: sequence length " + std::to_string(prompt.size()) +
                            " exceeds max_seq_len " + std::to_string(m.cfg.max_seq_len));
    for (size_t i = 0; i < prompt.size(); ++i) logits = decode_step(m, st, prompt[i]);
    for (int step = 0; step < max_new_tokens; ++step) {
        if (st.n >= m.cfg.max_seq_len) break;
        int best = 0;
        for (int j = 1; j < m.cfg.vocab_size; ++j)
            if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
        if (best == CharTokenizer::kEosId) break;
        out.push_back(best);
        if (static_cast<size_t>(st.n) >= static_cast<size_t>(m.cfg.max_seq_len)) break;
        logits = decode_step(m, st, best);
    }
    return out;
}

inline std::string generate(const TransformerLM& m, const CharTokenizer& tok,
                            const std::string& prompt, int max_new_tokens) {
    if (max_new_tokens == 0) return "";
    return tok.detokenize(generate_ids(m, tok.tokenize(prompt), max_new_tokens));
}

}  // namespace fable
