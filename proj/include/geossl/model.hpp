#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "geossl/grid.hpp"
#include "geossl/rng.hpp"
#include "geossl/tensor.hpp"

namespace geossl {

enum class PosMode { absolute, rotary };

// Architecture hyperparameters. The latent grid is H x W x D cells with C
// channels per token; the processor patchifies it into (H/p)(W/p)(D/p)
// patches and runs L pre-norm transformer blocks with grouped-query
// attention before unpatchifying back to T x C. Pooling projects to an
// E-dimensional global embedding.
struct ModelConfig {
    int H = 24, W = 24, D = 24;
    int C = 128;
    int E = 128;
    int L = 3;
    int n_heads = 4;
    int n_kv = 2;
    int p = 6;
    std::array<float, 3> radii{0.05f, 0.1f, 0.2f};
    PosMode pos_mode = PosMode::absolute;

    int T() const { return H * W * D; }
    int patch_vol() const { return p * p * p; }
    int patches() const { return (H / p) * (W / p) * (D / p); }
    int scale_dim() const { return C / 2; }  // per-scale AGNO output width
    int head_dim() const { return C / n_heads; }
    int kv_dim() const { return n_kv * head_dim(); }

    void validate() const {
        if (H < 2 || W < 2 || D < 2) throw std::runtime_error("model: grid dims must be >= 2");
        if (C < 2 || C % 2 != 0) throw std::runtime_error("model: C must be even and >= 2");
        if (E < 1) throw std::runtime_error("model: E must be >= 1");
        if (L < 1) throw std::runtime_error("model: L must be >= 1");
        if (p < 1 || H % p || W % p || D % p) {
            throw std::runtime_error("model: grid dims " + std::to_string(H) + "x" +
                                     std::to_string(W) + "x" + std::to_string(D) +
                                     " not divisible by patch size " + std::to_string(p));
        }
        if (n_heads < 1 || C % n_heads) {
            throw std::runtime_error("model: C=" + std::to_string(C) +
                                     " not divisible by n_heads=" + std::to_string(n_heads));
        }
        if (n_kv < 1 || n_heads % n_kv) {
            throw std::runtime_error("model: n_heads=" + std::to_string(n_heads) +
                                     " not divisible by n_kv=" + std::to_string(n_kv));
        }
        if (pos_mode == PosMode::rotary && head_dim() % 6 != 0) {
            throw std::runtime_error("model: rotary mode needs head dim divisible by 6, got " +
                                     std::to_string(head_dim()));
        }
        if (!(radii[0] > 0 && radii[0] < radii[1] && radii[1] < radii[2])) {
            throw std::runtime_error("model: radii must be positive and strictly increasing");
        }
    }
};

// Flat registry of named parameter matrices. Registration order is fixed by
// make_params, so index i means the same tensor across runs, checkpoints and
// optimizer state. decay_exempt marks biases, norm gains, temperatures and
// the mask embedding (excluded from weight decay).
template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<std::pair<int, int>> shapes;
    std::vector<std::vector<T>> values;
    std::vector<char> decay_exempt;

    int add(const std::string& name, int rows, int cols, bool exempt) {
        if (by_name_.count(name)) throw std::runtime_error("duplicate parameter " + name);
        const int idx = static_cast<int>(names.size());
        by_name_[name] = idx;
        names.push_back(name);
        shapes.emplace_back(rows, cols);
        values.emplace_back(static_cast<size_t>(rows) * cols, T(0));
        decay_exempt.push_back(exempt ? 1 : 0);
        return idx;
    }
    int index(const std::string& name) const {
        const auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::runtime_error("unknown parameter " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) != 0; }
    size_t count() const { return names.size(); }
    size_t total_values() const {
        size_t n = 0;
        for (const auto& v : values) n += v.size();
        return n;
    }
    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (size_t i = 0; i < names.size(); ++i) {
            out.add(names[i], shapes[i].first, shapes[i].second, decay_exempt[i] != 0);
            for (size_t k = 0; k < values[i].size(); ++k) {
                out.values[i][k] = static_cast<U>(values[i][k]);
            }
        }
        return out;
    }

private:
    std::unordered_map<std::string, int> by_name_;
};

template <typename T>
ParamStore<T> make_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamStore<T> ps;
    Rng rng(derive_seed(seed, "params"));
    const auto weight = [&](const std::string& name, int r, int c) {
        const int i = ps.add(name, r, c, false);
        for (auto& v : ps.values[static_cast<size_t>(i)]) {
            v = static_cast<T>(rng.normal() * 0.02);
        }
    };
    const auto bias = [&](const std::string& name, int r, int c) { ps.add(name, r, c, true); };
    const auto gain = [&](const std::string& name, int c) {
        const int i = ps.add(name, 1, c, true);
        std::fill(ps.values[static_cast<size_t>(i)].begin(),
                  ps.values[static_cast<size_t>(i)].end(), T(1));
    };

    const int C = cfg.C, dk = cfg.scale_dim(), dv = cfg.scale_dim();
    weight("sig_mlp.w1", kSignatureDim, C);
    bias("sig_mlp.b1", 1, C);
    weight("sig_mlp.w2", C, C);
    bias("sig_mlp.b2", 1, C);
    for (int s = 0; s < 3; ++s) {
        const std::string base = "agno" + std::to_string(s);
        weight(base + ".wq", C, dk);
        weight(base + ".wk", 7, dk);
        weight(base + ".wv", 7, dv);
        bias(base + ".log_tau", 1, 1);  // tau = exp(log_tau) starts at 1
    }
    weight("fusion.w", 3 * dv, C);
    bias("fusion.b", 1, C);
    {
        const int i = ps.add("mask_embed", 1, C, true);
        for (auto& v : ps.values[static_cast<size_t>(i)]) {
            v = static_cast<T>(rng.normal() * 0.02);
        }
    }
    weight("embed.w", cfg.patch_vol() * C, C);
    bias("embed.b", 1, C);
    if (cfg.pos_mode == PosMode::absolute) {
        weight("pos_embed", cfg.patches(), C);
    }
    for (int l = 0; l < cfg.L; ++l) {
        const std::string base = "layer" + std::to_string(l);
        gain(base + ".attn.gain", C);
        weight(base + ".attn.wq", C, C);
        weight(base + ".attn.wk", C, cfg.kv_dim());
        weight(base + ".attn.wv", C, cfg.kv_dim());
        weight(base + ".attn.wo", C, C);
        gain(base + ".mlp.gain", C);
        weight(base + ".mlp.w1", C, 4 * C);
        bias(base + ".mlp.b1", 1, 4 * C);
        weight(base + ".mlp.w2", 4 * C, C);
        bias(base + ".mlp.b2", 1, C);
    }
    weight("unembed.w", C, cfg.patch_vol() * C);
    bias("unembed.b", 1, cfg.patch_vol() * C);
    weight("pool.query", 1, C);
    weight("pool.w", C, cfg.E);
    bias("pool.b", 1, cfg.E);
    weight("recon.w1", C, C);
    bias("recon.b1", 1, C);
    weight("recon.w2", C, kSignatureDim);
    bias("recon.b2", 1, kSignatureDim);
    return ps;
}

// Per-scale neighbor pairs for one cloud, restricted to active cells and
// flattened: cell a (in active_indices order) owns feature rows
// [offsets[a], offsets[a+1]). Each row is [normal(3), curvature(1),
// relative position(3)].
struct ScalePairs {
    std::vector<int> offsets;
    std::vector<float> feats;  // n_pairs x 7, row-major
};

struct TokenizerInput {
    int T = 0;
    std::vector<int> active_indices;
    std::vector<char> active;       // T flags
    std::vector<float> signatures;  // active_count x 28
    std::array<ScalePairs, 3> scales;
    int active_count() const { return static_cast<int>(active_indices.size()); }
};

TokenizerInput build_tokenizer_input(const SurfacePointCloud& cloud, const LatentGrid& grid,
                                     const std::array<float, 3>& radii);

// Flat index table mapping (patch, within-patch offset) -> cell index:
// entry P*p^3 + o holds t. Both sides use x-fastest ordering.
std::vector<int> patch_cell_table(int H, int W, int D, int p);

// 3D integer coordinates of each patch, in patch index order.
std::vector<std::array<int, 3>> patch_positions(const ModelConfig& cfg);

// Optional capture of attention distributions for inspection/tests. Values
// are copied out of the forward pass; layout mirrors the producing op.
struct AttentionCapture {
    std::array<std::vector<double>, 3> agno_alpha;  // flat, matches ScalePairs
    std::vector<std::vector<double>> gqa_probs;     // per layer: B*n_heads*S*S
    std::vector<double> pool_alpha;                 // B*S
};

namespace detail {

template <typename T>
void check_matrix(const Graph<T>& g, int id, int r, int c, const char* what) {
    if (g.rows(id) != r || g.cols(id) != c) {
        throw std::runtime_error(std::string(what) + ": expected " + std::to_string(r) + "x" +
                                 std::to_string(c) + ", got " + std::to_string(g.rows(id)) + "x" +
                                 std::to_string(g.cols(id)));
    }
}

}  // namespace detail

// Cosine cross-attention from per-cell queries to neighbor pair features.
// q: A x dk (one row per active cell), wk: 7 x dk, wv: 7 x dv, log_tau: 1x1,
// feats: constant n_pairs x 7 with per-cell blocks given by offsets.
// Per cell: alpha_i = softmax_i(<q,k_i> / max(|q||k_i| tau, 1e-8)); the
// floor (rather than an additive epsilon) keeps the weights exactly
// invariant to any rescaling of q or k away from degenerate norms.
// out = sum_i alpha_i v_i. Nothing is cached; the backward pass recomputes
// keys, values and weights from the saved node values.
template <typename T>
int agno_attention(Graph<T>& g, int q, int wk, int wv, int log_tau, int feats,
                   const std::vector<int>& offsets, std::vector<double>* alpha_out = nullptr) {
    using Matrix = typename Graph<T>::Matrix;
    const int A = g.rows(q);
    const int dk = g.cols(q);
    const int dv = g.cols(wv);
    if (static_cast<int>(offsets.size()) != A + 1) {
        throw std::runtime_error("agno_attention: offsets size " + std::to_string(offsets.size()) +
                                 " does not match " + std::to_string(A) + " query rows");
    }
    detail::check_matrix(g, wk, 7, dk, "agno_attention wk");
    detail::check_matrix(g, feats, offsets.back(), 7, "agno_attention feats");
    if (g.needs_grad(feats)) throw std::runtime_error("agno_attention: feats must be constant");

    const T tau = std::exp(g.scalar(log_tau));
    const T guard = T(1e-8);

    Matrix K(offsets.back(), dk), V(offsets.back(), dv);
    K.noalias() = g.mat(feats) * g.mat(wk);
    V.noalias() = g.mat(feats) * g.mat(wv);

    std::vector<T> out(static_cast<size_t>(A) * dv, T(0));
    std::vector<T> alpha(static_cast<size_t>(offsets.back()));
    const auto& vq = g.val(q);
    for (int a = 0; a < A; ++a) {
        const int lo = offsets[static_cast<size_t>(a)], hi = offsets[static_cast<size_t>(a) + 1];
        if (hi <= lo) {
            throw std::runtime_error("agno_attention: cell " + std::to_string(a) +
                                     " has no neighbors");
        }
        const T* qa = vq.data() + static_cast<size_t>(a) * dk;
        T nq = 0;
        for (int c = 0; c < dk; ++c) nq += qa[c] * qa[c];
        nq = std::sqrt(nq);
        T mx = -std::numeric_limits<T>::infinity();
        for (int i = lo; i < hi; ++i) {
            T s = 0, nk = 0;
            for (int c = 0; c < dk; ++c) {
                s += qa[c] * K(i, c);
                nk += K(i, c) * K(i, c);
            }
            nk = std::sqrt(nk);
            const T l = s / std::max(nq * nk * tau, guard);
            alpha[static_cast<size_t>(i)] = l;
            mx = std::max(mx, l);
        }
        T z = 0;
        for (int i = lo; i < hi; ++i) {
            const T e = std::exp(alpha[static_cast<size_t>(i)] - mx);
            alpha[static_cast<size_t>(i)] = e;
            z += e;
        }
        T* oa = out.data() + static_cast<size_t>(a) * dv;
        for (int i = lo; i < hi; ++i) {
            const T w = alpha[static_cast<size_t>(i)] / z;
            alpha[static_cast<size_t>(i)] = w;
            for (int c = 0; c < dv; ++c) oa[c] += w * V(i, c);
        }
    }
    if (alpha_out) alpha_out->assign(alpha.begin(), alpha.end());

    auto offs = offsets;  // owned copy for the closure
    return g.make_node(
        A, dv, std::move(out), {q, wk, wv, log_tau, feats},
        [q, wk, wv, log_tau, feats, offs = std::move(offs)](Graph<T>& gr, int self) {
            const int A2 = gr.rows(q), dk2 = gr.cols(q), dv2 = gr.cols(wv);
            const T tau2 = std::exp(gr.scalar(log_tau));
            const T guard2 = T(1e-8);
            Matrix K2(offs.back(), dk2), V2(offs.back(), dv2);
            K2.noalias() = gr.mat(feats) * gr.mat(wk);
            V2.noalias() = gr.mat(feats) * gr.mat(wv);
            Matrix gK = Matrix::Zero(offs.back(), dk2);
            Matrix gV = Matrix::Zero(offs.back(), dv2);
            const auto& vq = gr.val(q);
            const auto& go = gr.grad(self);
            auto& gq = gr.grad(q);
            T gtau = 0;
            std::vector<T> w, s, d, galpha, nk;
            for (int a = 0; a < A2; ++a) {
                const int lo = offs[static_cast<size_t>(a)], hi = offs[static_cast<size_t>(a) + 1];
                const int n = hi - lo;
                const T* qa = vq.data() + static_cast<size_t>(a) * dk2;
                const T* goa = go.data() + static_cast<size_t>(a) * dv2;
                T nq = 0;
                for (int c = 0; c < dk2; ++c) nq += qa[c] * qa[c];
                nq = std::sqrt(nq);
                w.assign(static_cast<size_t>(n), T(0));
                s.assign(static_cast<size_t>(n), T(0));
                d.assign(static_cast<size_t>(n), T(0));
                galpha.assign(static_cast<size_t>(n), T(0));
                nk.assign(static_cast<size_t>(n), T(0));
                // recompute logits and weights exactly as the forward did
                T mx = -std::numeric_limits<T>::infinity();
                for (int i = 0; i < n; ++i) {
                    T dot = 0, kk = 0;
                    for (int c = 0; c < dk2; ++c) {
                        dot += qa[c] * K2(lo + i, c);
                        kk += K2(lo + i, c) * K2(lo + i, c);
                    }
                    nk[static_cast<size_t>(i)] = std::sqrt(kk);
                    s[static_cast<size_t>(i)] = dot;
                    d[static_cast<size_t>(i)] =
                        std::max(nq * nk[static_cast<size_t>(i)] * tau2, guard2);
                    w[static_cast<size_t>(i)] = dot / d[static_cast<size_t>(i)];
                    mx = std::max(mx, w[static_cast<size_t>(i)]);
                }
                T z = 0;
                for (int i = 0; i < n; ++i) {
                    w[static_cast<size_t>(i)] = std::exp(w[static_cast<size_t>(i)] - mx);
                    z += w[static_cast<size_t>(i)];
                }
                for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] /= z;
                // d(out)/d(v_i) = w_i; d(out)/d(w_i) = v_i
                T dotwg = 0;
                for (int i = 0; i < n; ++i) {
                    T ga = 0;
                    for (int c = 0; c < dv2; ++c) {
                        ga += goa[c] * V2(lo + i, c);
                        gV(lo + i, c) += w[static_cast<size_t>(i)] * goa[c];
                    }
                    galpha[static_cast<size_t>(i)] = ga;
                    dotwg += w[static_cast<size_t>(i)] * ga;
                }
                T gnq_acc = 0;
                T* gqa = gq.data() + static_cast<size_t>(a) * dk2;
                for (int i = 0; i < n; ++i) {
                    const T gl =
                        w[static_cast<size_t>(i)] * (galpha[static_cast<size_t>(i)] - dotwg);
                    const T gs = gl / d[static_cast<size_t>(i)];
                    // the denominator only moves with the norms above the floor
                    const bool floored = nq * nk[static_cast<size_t>(i)] * tau2 <= guard2;
                    const T gd = floored ? T(0)
                                         : -gl * s[static_cast<size_t>(i)] /
                                               (d[static_cast<size_t>(i)] *
                                                d[static_cast<size_t>(i)]);
                    for (int c = 0; c < dk2; ++c) gqa[c] += gs * K2(lo + i, c);
                    gnq_acc += gd * nk[static_cast<size_t>(i)] * tau2;
                    const T gnk = gd * nq * tau2;
                    const T kscale = nk[static_cast<size_t>(i)] > 0
                                         ? gnk / nk[static_cast<size_t>(i)]
                                         : T(0);
                    for (int c = 0; c < dk2; ++c) {
                        gK(lo + i, c) += gs * qa[c] + kscale * K2(lo + i, c);
                    }
                    gtau += gd * nq * nk[static_cast<size_t>(i)];
                }
                if (nq > 0) {
                    for (int c = 0; c < dk2; ++c) gqa[c] += gnq_acc * qa[c] / nq;
                }
            }
            if (gr.needs_grad(wk)) {
                typename Graph<T>::Map(gr.grad(wk).data(), 7, dk2).noalias() +=
                    gr.mat(feats).transpose() * gK;
            }
            if (gr.needs_grad(wv)) {
                typename Graph<T>::Map(gr.grad(wv).data(), 7, dv2).noalias() +=
                    gr.mat(feats).transpose() * gV;
            }
            if (gr.needs_grad(log_tau)) gr.grad(log_tau)[0] += gtau * tau2;
        });
}

// Multi-head attention core over B independent sequences of length S.
// q: (B*S) x C split into n_heads slices; k/v: (B*S) x (n_kv * head_dim);
// each group of n_heads/n_kv query heads shares one K/V head. Scores are
// scaled by 1/sqrt(head_dim); softmax is over the full sequence (no mask).
// If rope is enabled, per-axis rotary rotations (3D positions, channel pairs
// per axis, base 10000) are applied to q and k before the dot products.
struct RopePositions {
    bool enabled = false;
    std::vector<std::array<int, 3>> positions;  // length S when enabled
};

namespace detail {

// cos/sin tables, S x (head_dim/2), pair j covers channels
// (axis_chunk + 2i, axis_chunk + 2i + 1) with axis = j / (head_dim/6).
template <typename T>
void rope_tables(const RopePositions& rope, int S, int head_dim, std::vector<T>& cos_t,
                 std::vector<T>& sin_t) {
    const int pairs = head_dim / 2;
    const int per_axis = head_dim / 6;
    const int axis_dim = head_dim / 3;
    cos_t.resize(static_cast<size_t>(S) * pairs);
    sin_t.resize(static_cast<size_t>(S) * pairs);
    for (int t = 0; t < S; ++t) {
        for (int j = 0; j < pairs; ++j) {
            const int axis = j / per_axis;
            const int i = j % per_axis;
            const double omega = std::pow(10000.0, -2.0 * i / axis_dim);
            const double theta = rope.positions[static_cast<size_t>(t)][static_cast<size_t>(axis)] * omega;
            cos_t[static_cast<size_t>(t) * pairs + j] = static_cast<T>(std::cos(theta));
            sin_t[static_cast<size_t>(t) * pairs + j] = static_cast<T>(std::sin(theta));
        }
    }
}

// Rotates the head-dim channel block starting at `col0` of row `row`.
// sign=+1 applies the rotation, sign=-1 its inverse (for gradients).
template <typename T>
void rope_rotate_row(T* row, int col0, int head_dim, const T* cos_t, const T* sin_t, int sign) {
    const int per_axis = head_dim / 6;
    const int axis_dim = head_dim / 3;
    const int pairs = head_dim / 2;
    for (int j = 0; j < pairs; ++j) {
        const int axis = j / per_axis;
        const int i = j % per_axis;
        const int c0 = col0 + axis * axis_dim + 2 * i;
        const T x = row[c0], y = row[c0 + 1];
        const T c = cos_t[j], s = sin_t[j] * static_cast<T>(sign);
        row[c0] = x * c - y * s;
        row[c0 + 1] = x * s + y * c;
    }
}

}  // namespace detail

template <typename T>
int mha_core(Graph<T>& g, int q, int k, int v, int B, int S, int n_heads, int n_kv,
             const RopePositions& rope, std::vector<double>* probs_out = nullptr) {
    using Matrix = typename Graph<T>::Matrix;
    const int C = g.cols(q);
    const int dh = C / n_heads;
    const int Ckv = n_kv * dh;
    if (g.rows(q) != B * S || g.rows(k) != B * S || g.rows(v) != B * S) {
        throw std::runtime_error("mha_core: expected " + std::to_string(B * S) + " rows, got " +
                                 std::to_string(g.rows(q)) + "/" + std::to_string(g.rows(k)) +
                                 "/" + std::to_string(g.rows(v)));
    }
    detail::check_matrix(g, k, B * S, Ckv, "mha_core k");
    detail::check_matrix(g, v, B * S, Ckv, "mha_core v");
    if (rope.enabled && static_cast<int>(rope.positions.size()) != S) {
        throw std::runtime_error("mha_core: rope positions must cover the sequence");
    }
    const int group = n_heads / n_kv;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    std::vector<T> cos_t, sin_t;
    if (rope.enabled) detail::rope_tables(rope, S, dh, cos_t, sin_t);

    // rotated working copies (plain copies when rope is off)
    Matrix Q = g.mat(q), K = g.mat(k);
    if (rope.enabled) {
        const int pairs = dh / 2;
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < S; ++t) {
                const T* ct = cos_t.data() + static_cast<size_t>(t) * pairs;
                const T* st = sin_t.data() + static_cast<size_t>(t) * pairs;
                T* qrow = Q.data() + static_cast<size_t>(b * S + t) * C;
                for (int h = 0; h < n_heads; ++h) {
                    detail::rope_rotate_row(qrow, h * dh, dh, ct, st, +1);
                }
                T* krow = K.data() + static_cast<size_t>(b * S + t) * Ckv;
                for (int h = 0; h < n_kv; ++h) {
                    detail::rope_rotate_row(krow, h * dh, dh, ct, st, +1);
                }
            }
        }
    }

    std::vector<T> probs(static_cast<size_t>(B) * n_heads * S * S);
    std::vector<T> out(static_cast<size_t>(B * S) * C, T(0));
    const auto& vv = g.val(v);
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < n_heads; ++h) {
            const int kvh = h / group;
            Matrix P(S, S);
            for (int i = 0; i < S; ++i) {
                const T* qi = Q.data() + static_cast<size_t>(b * S + i) * C + h * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < S; ++j) {
                    const T* kj = K.data() + static_cast<size_t>(b * S + j) * Ckv + kvh * dh;
                    T s = 0;
                    for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= scale;
                    P(i, j) = s;
                    mx = std::max(mx, s);
                }
                T z = 0;
                for (int j = 0; j < S; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    z += P(i, j);
                }
                for (int j = 0; j < S; ++j) P(i, j) /= z;
                T* oi = out.data() + static_cast<size_t>(b * S + i) * C + h * dh;
                for (int j = 0; j < S; ++j) {
                    const T* vj = vv.data() + static_cast<size_t>(b * S + j) * Ckv + kvh * dh;
                    for (int c = 0; c < dh; ++c) oi[c] += P(i, j) * vj[c];
                }
            }
            std::copy(P.data(), P.data() + static_cast<size_t>(S) * S,
                      probs.data() + (static_cast<size_t>(b) * n_heads + h) * S * S);
        }
    }
    if (probs_out) probs_out->assign(probs.begin(), probs.end());

    return g.make_node(
        B * S, C, std::move(out), {q, k, v},
        [q, k, v, B, S, n_heads, n_kv, dh, Ckv, group, scale, probs = std::move(probs),
         cos_t = std::move(cos_t), sin_t = std::move(sin_t),
         use_rope = rope.enabled](Graph<T>& gr, int self) {
            const int C2 = gr.cols(q);
            const int pairs = dh / 2;
            Matrix Q2 = gr.mat(q), K2 = gr.mat(k);
            if (use_rope) {
                for (int b = 0; b < B; ++b) {
                    for (int t = 0; t < S; ++t) {
                        const T* ct = cos_t.data() + static_cast<size_t>(t) * pairs;
                        const T* st = sin_t.data() + static_cast<size_t>(t) * pairs;
                        T* qrow = Q2.data() + static_cast<size_t>(b * S + t) * C2;
                        for (int h = 0; h < n_heads; ++h) {
                            detail::rope_rotate_row(qrow, h * dh, dh, ct, st, +1);
                        }
                        T* krow = K2.data() + static_cast<size_t>(b * S + t) * Ckv;
                        for (int h = 0; h < n_kv; ++h) {
                            detail::rope_rotate_row(krow, h * dh, dh, ct, st, +1);
                        }
                    }
                }
            }
            const auto& go = gr.grad(self);
            const auto& vv = gr.val(v);
            Matrix gQ = Matrix::Zero(B * S, C2);
            Matrix gK = Matrix::Zero(B * S, Ckv);
            Matrix gV = Matrix::Zero(B * S, Ckv);
            std::vector<T> gP(static_cast<size_t>(S));
            for (int b = 0; b < B; ++b) {
                for (int h = 0; h < n_heads; ++h) {
                    const int kvh = h / group;
                    const T* P = probs.data() + (static_cast<size_t>(b) * n_heads + h) * S * S;
                    for (int i = 0; i < S; ++i) {
                        const T* goi = go.data() + static_cast<size_t>(b * S + i) * C2 + h * dh;
                        const T* Pi = P + static_cast<size_t>(i) * S;
                        T dotpg = 0;
                        for (int j = 0; j < S; ++j) {
                            const T* vj =
                                vv.data() + static_cast<size_t>(b * S + j) * Ckv + kvh * dh;
                            T s = 0;
                            for (int c = 0; c < dh; ++c) {
                                s += goi[c] * vj[c];
                                gV(b * S + j, kvh * dh + c) += Pi[j] * goi[c];
                            }
                            gP[static_cast<size_t>(j)] = s;
                            dotpg += Pi[j] * s;
                        }
                        const T* qi = Q2.data() + static_cast<size_t>(b * S + i) * C2 + h * dh;
                        for (int j = 0; j < S; ++j) {
                            const T gs = Pi[j] * (gP[static_cast<size_t>(j)] - dotpg) * scale;
                            const T* kj =
                                K2.data() + static_cast<size_t>(b * S + j) * Ckv + kvh * dh;
                            for (int c = 0; c < dh; ++c) {
                                gQ(b * S + i, h * dh + c) += gs * kj[c];
                                gK(b * S + j, kvh * dh + c) += gs * qi[c];
                            }
                        }
                    }
                }
            }
            if (use_rope) {
                // rotations are orthogonal; gradients get the inverse rotation
                for (int b = 0; b < B; ++b) {
                    for (int t = 0; t < S; ++t) {
                        const T* ct = cos_t.data() + static_cast<size_t>(t) * pairs;
                        const T* st = sin_t.data() + static_cast<size_t>(t) * pairs;
                        T* qrow = gQ.data() + static_cast<size_t>(b * S + t) * C2;
                        for (int h = 0; h < n_heads; ++h) {
                            detail::rope_rotate_row(qrow, h * dh, dh, ct, st, -1);
                        }
                        T* krow = gK.data() + static_cast<size_t>(b * S + t) * Ckv;
                        for (int h = 0; h < n_kv; ++h) {
                            detail::rope_rotate_row(krow, h * dh, dh, ct, st, -1);
                        }
                    }
                }
            }
            if (gr.needs_grad(q)) gr.gmat(q) += gQ;
            if (gr.needs_grad(k)) gr.gmat(k) += gK;
            if (gr.needs_grad(v)) gr.gmat(v) += gV;
        });
}

// Gathers the token grid into patch rows: (B*T) x C -> (B*Pn) x (p^3 * C).
// Pure element permutation; the backward pass scatters through the same map.
template <typename T>
int patchify(Graph<T>& g, int x, int H, int W, int D, int p, int B) {
    const int C = g.cols(x);
    const int Tn = H * W * D;
    const int pv = p * p * p;
    const int Pn = Tn / pv;
    detail::check_matrix(g, x, B * Tn, C, "patchify input");
    const std::vector<int> table = patch_cell_table(H, W, D, p);
    const auto& vx = g.val(x);
    std::vector<T> out(static_cast<size_t>(B) * Pn * pv * C);
    for (int b = 0; b < B; ++b) {
        for (int P = 0; P < Pn; ++P) {
            T* dst = out.data() + (static_cast<size_t>(b) * Pn + P) * (static_cast<size_t>(pv) * C);
            for (int o = 0; o < pv; ++o) {
                const int t = table[static_cast<size_t>(P) * pv + o];
                std::copy_n(vx.data() + (static_cast<size_t>(b) * Tn + t) * C, C,
                            dst + static_cast<size_t>(o) * C);
            }
        }
    }
    return g.make_node(B * Pn, pv * C, std::move(out), {x},
                       [x, B, Pn, pv, Tn, C, table](Graph<T>& gr, int self) {
                           const auto& go = gr.grad(self);
                           auto& gx = gr.grad(x);
                           for (int b = 0; b < B; ++b) {
                               for (int P = 0; P < Pn; ++P) {
                                   const T* src = go.data() + (static_cast<size_t>(b) * Pn + P) *
                                                                  (static_cast<size_t>(pv) * C);
                                   for (int o = 0; o < pv; ++o) {
                                       const int t = table[static_cast<size_t>(P) * pv + o];
                                       T* dst = gx.data() + (static_cast<size_t>(b) * Tn + t) * C;
                                       const T* s = src + static_cast<size_t>(o) * C;
                                       for (int c = 0; c < C; ++c) dst[c] += s[c];
                                   }
                               }
                           }
                       });
}

// Inverse of patchify: (B*Pn) x (p^3 * C) -> (B*T) x C.
template <typename T>
int unpatchify(Graph<T>& g, int x, int H, int W, int D, int p, int B) {
    const int Tn = H * W * D;
    const int pv = p * p * p;
    const int Pn = Tn / pv;
    if (g.cols(x) % pv != 0) {
        throw std::runtime_error("unpatchify: column count " + std::to_string(g.cols(x)) +
                                 " not divisible by patch volume " + std::to_string(pv));
    }
    const int C = g.cols(x) / pv;
    detail::check_matrix(g, x, B * Pn, pv * C, "unpatchify input");
    const std::vector<int> table = patch_cell_table(H, W, D, p);
    const auto& vx = g.val(x);
    std::vector<T> out(static_cast<size_t>(B) * Tn * C);
    for (int b = 0; b < B; ++b) {
        for (int P = 0; P < Pn; ++P) {
            const T* src = vx.data() + (static_cast<size_t>(b) * Pn + P) * (static_cast<size_t>(pv) * C);
            for (int o = 0; o < pv; ++o) {
                const int t = table[static_cast<size_t>(P) * pv + o];
                std::copy_n(src + static_cast<size_t>(o) * C, C,
                            out.data() + (static_cast<size_t>(b) * Tn + t) * C);
            }
        }
    }
    return g.make_node(B * Tn, C, std::move(out), {x},
                       [x, B, Pn, pv, Tn, C, table](Graph<T>& gr, int self) {
                           const auto& go = gr.grad(self);
                           auto& gx = gr.grad(x);
                           for (int b = 0; b < B; ++b) {
                               for (int P = 0; P < Pn; ++P) {
                                   T* dst = gx.data() + (static_cast<size_t>(b) * Pn + P) *
                                                            (static_cast<size_t>(pv) * C);
                                   for (int o = 0; o < pv; ++o) {
                                       const int t = table[static_cast<size_t>(P) * pv + o];
                                       const T* s = go.data() + (static_cast<size_t>(b) * Tn + t) * C;
                                       T* d = dst + static_cast<size_t>(o) * C;
                                       for (int c = 0; c < C; ++c) d[c] += s[c];
                                   }
                               }
                           }
                       });
}

// Single-query attention pooling over B sequences of S tokens each.
// z: (B*S) x C, query: 1 x C. Logits <query, z_t>/sqrt(C), softmax over the
// sequence, output B x C convex combinations.
template <typename T>
int attention_pool_core(Graph<T>& g, int z, int query, int B, int S,
                        std::vector<double>* alpha_out = nullptr) {
    const int C = g.cols(z);
    detail::check_matrix(g, z, B * S, C, "attention_pool z");
    detail::check_matrix(g, query, 1, C, "attention_pool query");
    const T scale = T(1) / std::sqrt(static_cast<T>(C));
    const auto& vz = g.val(z);
    const auto& vq = g.val(query);
    std::vector<T> alpha(static_cast<size_t>(B) * S);
    std::vector<T> out(static_cast<size_t>(B) * C, T(0));
    for (int b = 0; b < B; ++b) {
        T* ab = alpha.data() + static_cast<size_t>(b) * S;
        T mx = -std::numeric_limits<T>::infinity();
        for (int t = 0; t < S; ++t) {
            const T* zt = vz.data() + static_cast<size_t>(b * S + t) * C;
            T s = 0;
            for (int c = 0; c < C; ++c) s += vq[static_cast<size_t>(c)] * zt[c];
            ab[t] = s * scale;
            mx = std::max(mx, ab[t]);
        }
        T z_sum = 0;
        for (int t = 0; t < S; ++t) {
            ab[t] = std::exp(ab[t] - mx);
            z_sum += ab[t];
        }
        T* ob = out.data() + static_cast<size_t>(b) * C;
        for (int t = 0; t < S; ++t) {
            ab[t] /= z_sum;
            const T* zt = vz.data() + static_cast<size_t>(b * S + t) * C;
            for (int c = 0; c < C; ++c) ob[c] += ab[t] * zt[c];
        }
    }
    if (alpha_out) alpha_out->assign(alpha.begin(), alpha.end());

    return g.make_node(
        B, C, std::move(out), {z, query},
        [z, query, B, S, scale, alpha = std::move(alpha)](Graph<T>& gr, int self) {
            const int C2 = gr.cols(z);
            const auto& go = gr.grad(self);
            const auto& vz = gr.val(z);
            const auto& vq = gr.val(query);
            std::vector<T> galpha(static_cast<size_t>(S));
            for (int b = 0; b < B; ++b) {
                const T* gob = go.data() + static_cast<size_t>(b) * C2;
                const T* ab = alpha.data() + static_cast<size_t>(b) * S;
                T dotag = 0;
                for (int t = 0; t < S; ++t) {
                    const T* zt = vz.data() + static_cast<size_t>(b * S + t) * C2;
                    T s = 0;
                    for (int c = 0; c < C2; ++c) s += gob[c] * zt[c];
                    galpha[static_cast<size_t>(t)] = s;
                    dotag += ab[t] * s;
                }
                for (int t = 0; t < S; ++t) {
                    const T gl = ab[t] * (galpha[static_cast<size_t>(t)] - dotag) * scale;
                    const T* zt = vz.data() + static_cast<size_t>(b * S + t) * C2;
                    if (gr.needs_grad(z)) {
                        T* gzt = gr.grad(z).data() + static_cast<size_t>(b * S + t) * C2;
                        for (int c = 0; c < C2; ++c) {
                            gzt[c] += ab[t] * gob[c] + gl * vq[static_cast<size_t>(c)];
                        }
                    }
                    if (gr.needs_grad(query)) {
                        auto& gq = gr.grad(query);
                        for (int c = 0; c < C2; ++c) gq[static_cast<size_t>(c)] += gl * zt[c];
                    }
                }
            }
        });
}

template <typename T>
struct ProcessorResult {
    int tokens_out = -1;   // (B*T) x C refined token grid
    int pooled_raw = -1;   // B x E
    int pooled_unit = -1;  // B x E, L2-normalized rows
};

// Builds the full forward graph for one batch: parameters are bound as graph
// leaves once, then tokenize / process / recon_head append ops on demand.
template <typename T>
class ModelForward {
public:
    ModelForward(Graph<T>& g, const ModelConfig& cfg, const ParamStore<T>& store, bool trainable)
        : g_(g), cfg_(cfg), store_(store) {
        ids_.reserve(store.count());
        for (size_t i = 0; i < store.count(); ++i) {
            ids_.push_back(g.leaf(store.shapes[i].first, store.shapes[i].second, store.values[i],
                                  trainable));
        }
    }
    // Binds to leaves created by the caller (one per parameter, same order).
    ModelForward(Graph<T>& g, const ModelConfig& cfg, const ParamStore<T>& store,
                 std::vector<int> bound_ids)
        : g_(g), cfg_(cfg), store_(store), ids_(std::move(bound_ids)) {
        if (ids_.size() != store.count()) {
            throw std::runtime_error("ModelForward: bound id count mismatch");
        }
    }

    int id(const std::string& name) const { return ids_[static_cast<size_t>(store_.index(name))]; }
    const std::vector<int>& param_ids() const { return ids_; }

    // Point cloud -> T x C token grid.
    int tokenize(const TokenizerInput& in, AttentionCapture* cap = nullptr) {
        if (in.active_indices.empty()) {
            throw std::runtime_error("tokenize: cloud has no active cells at any radius");
        }
        if (in.T != cfg_.T()) {
            throw std::runtime_error("tokenize: input built for T=" + std::to_string(in.T) +
                                     ", model has T=" + std::to_string(cfg_.T()));
        }
        const int A = in.active_count();
        std::vector<T> sig(in.signatures.begin(), in.signatures.end());
        const int y = g_.constant(A, kSignatureDim, std::move(sig));
        const int Y = sig_mlp(y);  // A x C
        const int zero_sig = g_.constant(1, kSignatureDim, std::vector<T>(kSignatureDim, T(0)));
        const int Y0 = sig_mlp(zero_sig);  // 1 x C, the inactive-cell embedding

        std::vector<int> per_scale;
        for (int s = 0; s < 3; ++s) {
            const std::string base = "agno" + std::to_string(s);
            const int q = g_.matmul(Y, id(base + ".wq"));
            const auto& sp = in.scales[static_cast<size_t>(s)];
            std::vector<T> fv(sp.feats.begin(), sp.feats.end());
            const int feats = g_.constant(static_cast<int>(sp.feats.size() / 7), 7, std::move(fv));
            per_scale.push_back(agno_attention(g_, q, id(base + ".wk"), id(base + ".wv"),
                                               id(base + ".log_tau"), feats, sp.offsets,
                                               cap ? &cap->agno_alpha[static_cast<size_t>(s)]
                                                   : nullptr));
        }
        const int fused = g_.linear(g_.concat_cols(per_scale), id("fusion.w"), id("fusion.b"));
        const int tok_act = g_.add(fused, Y);
        // inactive cells: no neighbors, so the fusion input is zero and only
        // the fusion bias and the zero-signature MLP output remain
        const int c0 = g_.add(Y0, id("fusion.b"));
        return g_.broadcast_scatter(c0, cfg_.T(), in.active_indices, tok_act);
    }

    // tokens: (B*T) x C. mask_rows are global row indices (part*T + cell)
    // whose tokens are replaced by the learned mask embedding before the
    // processor runs; active (optional, size B*T) validates they are active.
    ProcessorResult<T> process(int tokens, int B, const std::vector<int>& mask_rows,
                               const std::vector<char>& active = {},
                               AttentionCapture* cap = nullptr) {
        const int Tn = cfg_.T();
        detail::check_matrix(g_, tokens, B * Tn, cfg_.C, "process tokens");
        if (!active.empty()) {
            if (static_cast<int>(active.size()) != B * Tn) {
                throw std::runtime_error("process: active flag count mismatch");
            }
            for (const int r : mask_rows) {
                if (r < 0 || r >= B * Tn || !active[static_cast<size_t>(r)]) {
                    throw std::runtime_error("process: mask position " + std::to_string(r) +
                                             " is not an active cell");
                }
            }
        }
        int x = tokens;
        if (!mask_rows.empty()) {
            x = g_.replace_rows_with_row(x, mask_rows, id("mask_embed"));
        }
        x = patchify(g_, x, cfg_.H, cfg_.W, cfg_.D, cfg_.p, B);
        x = g_.linear(x, id("embed.w"), id("embed.b"));
        const int S = cfg_.patches();
        RopePositions rope;
        if (cfg_.pos_mode == PosMode::absolute) {
            std::vector<int> tiles(static_cast<size_t>(B), id("pos_embed"));
            x = g_.add(x, g_.concat_rows(tiles));
        } else {
            rope.enabled = true;
            rope.positions = patch_positions(cfg_);
        }
        for (int l = 0; l < cfg_.L; ++l) {
            const std::string base = "layer" + std::to_string(l);
            const int hn = g_.rms_norm(x, id(base + ".attn.gain"));
            const int q = g_.matmul(hn, id(base + ".attn.wq"));
            const int k = g_.matmul(hn, id(base + ".attn.wk"));
            const int v = g_.matmul(hn, id(base + ".attn.wv"));
            std::vector<double>* pcap = nullptr;
            if (cap) {
                cap->gqa_probs.emplace_back();
                pcap = &cap->gqa_probs.back();
            }
            const int att = mha_core(g_, q, k, v, B, S, cfg_.n_heads, cfg_.n_kv, rope, pcap);
            x = g_.add(x, g_.matmul(att, id(base + ".attn.wo")));
            const int mn = g_.rms_norm(x, id(base + ".mlp.gain"));
            const int mid = g_.gelu(g_.linear(mn, id(base + ".mlp.w1"), id(base + ".mlp.b1")));
            x = g_.add(x, g_.linear(mid, id(base + ".mlp.w2"), id(base + ".mlp.b2")));
        }
        // the residual stream feeds the unembed directly (no final norm)
        x = g_.linear(x, id("unembed.w"), id("unembed.b"));
        ProcessorResult<T> res;
        res.tokens_out = unpatchify(g_, x, cfg_.H, cfg_.W, cfg_.D, cfg_.p, B);
        const int pooled_c = attention_pool_core(g_, res.tokens_out, id("pool.query"), B, Tn,
                                                 cap ? &cap->pool_alpha : nullptr);
        res.pooled_raw = g_.linear(pooled_c, id("pool.w"), id("pool.b"));
        res.pooled_unit = g_.l2_normalize_rows(res.pooled_raw);
        return res;
    }

    // Predicts 28-dim raw signatures for the given rows of the refined grid.
    int recon_head(int tokens_out, const std::vector<int>& rows) {
        if (rows.empty()) throw std::runtime_error("recon_head: no rows requested");
        const int zr = g_.gather_rows(tokens_out, rows);
        const int h = g_.gelu(g_.linear(zr, id("recon.w1"), id("recon.b1")));
        return g_.linear(h, id("recon.w2"), id("recon.b2"));
    }

private:
    int sig_mlp(int x) {
        const int h = g_.gelu(g_.linear(x, id("sig_mlp.w1"), id("sig_mlp.b1")));
        return g_.linear(h, id("sig_mlp.w2"), id("sig_mlp.b2"));
    }

    Graph<T>& g_;
    const ModelConfig& cfg_;
    const ParamStore<T>& store_;
    std::vector<int> ids_;
};

}  // namespace geossl
