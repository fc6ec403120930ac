#pragma once

// Tensor-parallel decoder-only transformer (GQA attention + SwiGLU FFN) with
// sequence-parallel collectives and hook points at the four protected
// submodule boundaries. Forward and backward are hand-written and fully
// deterministic; the scalar type is a template parameter so tests can run the
// identical computation in double precision.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdclab/collectives.hpp"
#include "sdclab/tensor.hpp"

namespace sdclab {

struct ModelConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int kv_heads = 2;
    int seq_len = 128;
    int vocab = 256;
    int tp_degree = 4;
    int micro_batch = 1;
    int grad_accum = 4;
    int ffn_mult = 4;
    Dtype dtype = Dtype::f32;

    int head_dim() const { return hidden / heads; }
    int ffn_dim() const { return ffn_mult * hidden; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ContractViolation("model config: " + m); };
        if (layers < 0) fail("layers must be >= 0");
        if (hidden <= 0 || heads <= 0 || kv_heads <= 0 || seq_len <= 0 || vocab < 2 ||
            tp_degree <= 0 || micro_batch <= 0 || grad_accum <= 0 || ffn_mult <= 0)
            fail("all sizes must be positive");
        if (heads % kv_heads != 0) fail("heads must be divisible by kv_heads");
        if (heads % tp_degree != 0) fail("heads must be divisible by tp_degree");
        if (hidden % heads != 0) fail("hidden must be divisible by heads");
        if (seq_len % tp_degree != 0) fail("seq_len must be divisible by tp_degree");
        if (ffn_dim() % tp_degree != 0) fail("ffn dim must be divisible by tp_degree");
    }
};

template <typename T>
struct LayerParamsT {
    TensorT<T> wq, wk, wv, wo;      // attention projections
    TensorT<T> ln1_g, ln1_b;        // post-attention layer norm
    TensorT<T> wg, wu, wd;          // SwiGLU gate/up/down
    TensorT<T> ln2_g, ln2_b;        // post-FFN layer norm
};

template <typename T>
struct ParamsT {
    TensorT<T> embed;
    std::vector<LayerParamsT<T>> layers;
    TensorT<T> head;

    template <class F>
    void for_each(F&& f) {
        f("embed", embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            auto& lp = layers[l];
            f(p + "wq", lp.wq);
            f(p + "wk", lp.wk);
            f(p + "wv", lp.wv);
            f(p + "wo", lp.wo);
            f(p + "ln1_g", lp.ln1_g);
            f(p + "ln1_b", lp.ln1_b);
            f(p + "wg", lp.wg);
            f(p + "wu", lp.wu);
            f(p + "wd", lp.wd);
            f(p + "ln2_g", lp.ln2_g);
            f(p + "ln2_b", lp.ln2_b);
        }
        f("head", head);
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<ParamsT*>(this)->for_each(
            [&](const std::string& n, TensorT<T>& t) { f(n, static_cast<const TensorT<T>&>(t)); });
    }
};

template <typename T>
ParamsT<T> zeros_like_params(const ModelConfig& cfg) {
    const int64_t H = cfg.hidden, V = cfg.vocab, F = cfg.ffn_dim();
    const int64_t kvdim = static_cast<int64_t>(cfg.kv_heads) * cfg.head_dim();
    ParamsT<T> p;
    p.embed = TensorT<T>({V, H});
    p.head = TensorT<T>({H, V});
    p.layers.resize(static_cast<size_t>(cfg.layers));
    for (auto& lp : p.layers) {
        lp.wq = TensorT<T>({H, H});
        lp.wk = TensorT<T>({H, kvdim});
        lp.wv = TensorT<T>({H, kvdim});
        lp.wo = TensorT<T>({H, H});
        lp.ln1_g = TensorT<T>({H});
        lp.ln1_b = TensorT<T>({H});
        lp.wg = TensorT<T>({H, F});
        lp.wu = TensorT<T>({H, F});
        lp.wd = TensorT<T>({F, H});
        lp.ln2_g = TensorT<T>({H});
        lp.ln2_b = TensorT<T>({H});
    }
    return p;
}

/// Xavier uniform on all projection matrices, Kaiming uniform on the embedding
/// table; layer-norm gains start at one, biases at zero. One rng stream per
/// tensor so shapes elsewhere never shift the draws.
template <typename T>
ParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    ParamsT<T> p = zeros_like_params<T>(cfg);
    uint64_t stream = 0;
    p.for_each([&](const std::string& name, TensorT<T>& t) {
        Rng rng(seed, ++stream);
        if (t.rank() != 2) {
            const bool gain = name.find("_g") != std::string::npos;
            for (int64_t i = 0; i < t.size(); ++i) t.at(i) = gain ? T(1) : T(0);
            return;
        }
        const InitScheme scheme =
            name == "embed" ? InitScheme::kaiming_uniform : InitScheme::xavier_uniform;
        t = init_weight<T>(t.dim(0), t.dim(1), scheme, rng);
    });
    return p;
}

// ---------------------------------------------------------------------------
// Hooks and matmul indirection

enum class HookKind { fwd_attn, fwd_ffn, bwd_attn, bwd_ffn };

inline const char* hook_kind_name(HookKind k) {
    switch (k) {
        case HookKind::fwd_attn: return "fwd_attn";
        case HookKind::fwd_ffn: return "fwd_ffn";
        case HookKind::bwd_attn: return "bwd_attn";
        case HookKind::bwd_ffn: return "bwd_ffn";
    }
    return "?";
}

struct HookSite {
    HookKind kind;
    int layer;
    int rank;
};

/// Fires on the tensor produced immediately before the direction-appropriate
/// reduce-scatter; the callback may mutate the tensor in place.
template <typename T>
using HookFn = std::function<void(const HookSite&, TensorT<T>&)>;

enum class MmMode { NN, NT, TN };

struct MatmulSite {
    const char* op;  // which linear-layer product this is, e.g. "wq" or "wq_dx"
    int layer;
    int rank;
    MmMode mode;
};

template <typename T>
using MatmulFn = std::function<TensorT<T>(const TensorT<T>&, const TensorT<T>&, const MatmulSite&)>;

template <typename T>
TensorT<T> plain_matmul(const TensorT<T>& a, const TensorT<T>& b, const MatmulSite& s) {
    switch (s.mode) {
        case MmMode::NN: return matmul(a, b);
        case MmMode::NT: return matmul_nt(a, b);
        case MmMode::TN: return matmul_tn(a, b);
    }
    throw ContractViolation("bad matmul mode");
}

// ---------------------------------------------------------------------------
// Forward/backward

namespace detail {

template <typename T>
struct RankAttnCache {
    TensorT<T> q, k, v, att;
    std::vector<TensorT<T>> probs;  // per local head
};

template <typename T>
struct RankFfnCache {
    TensorT<T> g, u, sw, s;
};

template <typename T>
struct LayerCacheT {
    TensorT<T> xa, xg;
    std::vector<TensorT<T>> x_in;  // shards entering the layer
    std::vector<RankAttnCache<T>> attn;
    std::vector<RankFfnCache<T>> ffn;
    std::vector<TensorT<T>> xhat1, x_mid, xhat2;
    std::vector<LayerNormCache> ln1, ln2;
};

template <typename T>
struct SampleCacheT {
    std::vector<int> tokens;
    std::vector<LayerCacheT<T>> layers;
    std::vector<TensorT<T>> x_final;     // shards after the last layer
    std::vector<TensorT<T>> head_probs;  // per rank softmax over vocab
};

}  // namespace detail

/// One microstep of paired forward/backward over MBS samples. Hook tensors are
/// the row-concatenation of the per-sample partials, shape [MBS*L x H].
template <typename T>
class ModelRun {
public:
    ModelRun(const ModelConfig& cfg, const ParamsT<T>& params, HookFn<T> hook = nullptr,
             MatmulFn<T> mm = nullptr)
        : cfg_(cfg), params_(params), hook_(std::move(hook)), mm_(std::move(mm)) {
        cfg_.validate();
        if (!mm_) mm_ = plain_matmul<T>;
    }

    /// Returns the microstep loss (mean next-token cross entropy over samples).
    double forward(const std::vector<std::vector<int>>& tokens, int64_t step = 0,
                   int64_t microstep = 0) {
        (void)step;
        (void)microstep;
        const int R = cfg_.tp_degree, L = cfg_.seq_len, H = cfg_.hidden;
        const int Ls = L / R, MBS = cfg_.micro_batch;
        if (static_cast<int>(tokens.size()) != MBS)
            throw ContractViolation("token batch does not match micro_batch");
        samples_.assign(static_cast<size_t>(MBS), {});

        // Embedding, sequence-sharded.
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            sc.tokens = tokens[static_cast<size_t>(b)];
            if (static_cast<int>(sc.tokens.size()) != L)
                throw ContractViolation("token sequence length mismatch");
            sc.x_final.resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                TensorT<T> shard({Ls, H}, cfg_.dtype);
                for (int i = 0; i < Ls; ++i) {
                    const int pos = r * Ls + i;
                    const int id = sc.tokens[static_cast<size_t>(pos)];
                    if (id < 0 || id >= cfg_.vocab) throw ContractViolation("token id out of vocab");
                    for (int j = 0; j < H; ++j) shard.at(i, j) = params_.embed.at(id, j);
                }
                maybe_round(shard);
                sc.x_final[static_cast<size_t>(r)] = std::move(shard);
            }
            sc.layers.resize(static_cast<size_t>(cfg_.layers));
        }

        for (int l = 0; l < cfg_.layers; ++l) layer_forward(l);

        // Output head and loss, combined in ascending (rank, sample) order.
        double loss = 0.0;
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            sc.head_probs.resize(static_cast<size_t>(R));
            double ce_sum = 0.0;
            for (int r = 0; r < R; ++r) {
                TensorT<T> logits = mm_(sc.x_final[static_cast<size_t>(r)], params_.head,
                                        {"head", -1, r, MmMode::NN});
                maybe_round(logits);
                TensorT<T> probs({Ls, static_cast<int64_t>(cfg_.vocab)});
                for (int i = 0; i < Ls; ++i) {
                    T mx = logits.at(i, 0);
                    for (int j = 1; j < cfg_.vocab; ++j) mx = std::max(mx, logits.at(i, j));
                    T sum = 0;
                    for (int j = 0; j < cfg_.vocab; ++j) {
                        const T e = std::exp(logits.at(i, j) - mx);
                        probs.at(i, j) = e;
                        sum += e;
                    }
                    for (int j = 0; j < cfg_.vocab; ++j) probs.at(i, j) /= sum;
                    const int pos = r * Ls + i;
                    if (pos < L - 1) {
                        const int label = sc.tokens[static_cast<size_t>(pos + 1)];
                        const double p = static_cast<double>(probs.at(i, label));
                        if (!(p > 0.0)) throw NumericalFailure("zero probability in cross entropy");
                        ce_sum += -std::log(p);
                    }
                }
                sc.head_probs[static_cast<size_t>(r)] = std::move(probs);
            }
            loss += ce_sum / static_cast<double>(L - 1);
        }
        loss /= static_cast<double>(MBS);
        if (!std::isfinite(loss)) throw NumericalFailure("non-finite loss");
        loss_ = loss;
        return loss;
    }

    /// Backward for the cached forward; accumulates parameter gradients into
    /// grads (ascending rank, ascending sample order).
    void backward(ParamsT<T>& grads) {
        const int R = cfg_.tp_degree, L = cfg_.seq_len, H = cfg_.hidden;
        const int Ls = L / R, MBS = cfg_.micro_batch, V = cfg_.vocab;
        const double inv = 1.0 / (static_cast<double>(MBS) * static_cast<double>(L - 1));

        // dX[b][r]: gradient w.r.t. the sequence-sharded activations.
        std::vector<std::vector<TensorT<T>>> dx(static_cast<size_t>(MBS));
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            dx[static_cast<size_t>(b)].resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                const auto& probs = sc.head_probs[static_cast<size_t>(r)];
                TensorT<T> dlogits({Ls, static_cast<int64_t>(V)});
                for (int i = 0; i < Ls; ++i) {
                    const int pos = r * Ls + i;
                    if (pos >= L - 1) continue;  // last position predicts nothing
                    const int label = sc.tokens[static_cast<size_t>(pos + 1)];
                    for (int j = 0; j < V; ++j) {
                        double g = static_cast<double>(probs.at(i, j)) * inv;
                        if (j == label) g -= inv;
                        dlogits.at(i, j) = static_cast<T>(g);
                    }
                }
                add_inplace(grads.head, mm_(sc.x_final[static_cast<size_t>(r)], dlogits,
                                            {"head_dw", -1, r, MmMode::TN}));
                TensorT<T> d = mm_(dlogits, params_.head, {"head_dx", -1, r, MmMode::NT});
                maybe_round(d);
                dx[static_cast<size_t>(b)][static_cast<size_t>(r)] = std::move(d);
            }
        }

        for (int l = cfg_.layers - 1; l >= 0; --l) layer_backward(l, dx, grads);

        // Embedding rows.
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            for (int r = 0; r < R; ++r) {
                const auto& d = dx[static_cast<size_t>(b)][static_cast<size_t>(r)];
                for (int i = 0; i < Ls; ++i) {
                    const int id = sc.tokens[static_cast<size_t>(r * Ls + i)];
                    for (int j = 0; j < H; ++j) grads.embed.at(id, j) += d.at(i, j);
                }
            }
        }
        grads.for_each([](const std::string& n, TensorT<T>& t) {
            if (!t.all_finite()) throw NumericalFailure("non-finite gradient in " + n);
        });
    }

    double loss() const { return loss_; }
    const detail::SampleCacheT<T>& sample_cache(int b) const {
        return samples_.at(static_cast<size_t>(b));
    }

private:
    void maybe_round(TensorT<T>& t) {
        if (cfg_.dtype != Dtype::bf16emu) return;
        t.set_dtype(Dtype::bf16emu);
        for (int64_t i = 0; i < t.size(); ++i) t.at(i) = static_cast<T>(round_bf16(t.at(i)));
    }

    // kv head range [lo, hi) needed by rank r's query heads.
    void kv_range(int r, int* lo, int* hi) const {
        const int hpr = cfg_.heads / cfg_.tp_degree;
        const int group = cfg_.heads / cfg_.kv_heads;
        *lo = (r * hpr) / group;
        *hi = ((r + 1) * hpr - 1) / group + 1;
    }

    void fire_hook(HookKind kind, int l, int r, std::vector<TensorT<T>*> per_sample) {
        if (!hook_) return;
        const HookSite site{kind, l, r};
        if (per_sample.size() == 1) {
            hook_(site, *per_sample[0]);
            return;
        }
        // Concatenate sample partials so the hook sees one [MBS*L x H] tensor.
        const int64_t rows = per_sample[0]->dim(0), cols = per_sample[0]->dim(1);
        TensorT<T> cat({static_cast<int64_t>(per_sample.size()) * rows, cols});
        for (size_t b = 0; b < per_sample.size(); ++b)
            std::memcpy(cat.data() + static_cast<int64_t>(b) * rows * cols, per_sample[b]->data(),
                        static_cast<size_t>(rows * cols) * sizeof(T));
        hook_(site, cat);
        for (size_t b = 0; b < per_sample.size(); ++b)
            std::memcpy(per_sample[b]->data(), cat.data() + static_cast<int64_t>(b) * rows * cols,
                        static_cast<size_t>(rows * cols) * sizeof(T));
    }

    void layer_forward(int l) {
        const int R = cfg_.tp_degree, MBS = cfg_.micro_batch;
        const int hpr = cfg_.heads / R, dh = cfg_.head_dim();
        const int group = cfg_.heads / cfg_.kv_heads;
        const int Fr = cfg_.ffn_dim() / R;
        const auto& lp = params_.layers[static_cast<size_t>(l)];
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<std::vector<TensorT<T>>> partial(static_cast<size_t>(MBS));

        // Attention.
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            auto& lc = sc.layers[static_cast<size_t>(l)];
            lc.x_in = sc.x_final;  // shards entering this layer
            lc.xa = collectives::all_gather(lc.x_in);
            lc.attn.resize(static_cast<size_t>(R));
            partial[static_cast<size_t>(b)].resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                auto& ac = lc.attn[static_cast<size_t>(r)];
                int klo, khi;
                kv_range(r, &klo, &khi);
                TensorT<T> wq_c = col_slice(lp.wq, static_cast<int64_t>(r) * hpr * dh,
                                            static_cast<int64_t>(r + 1) * hpr * dh);
                TensorT<T> wk_c = col_slice(lp.wk, static_cast<int64_t>(klo) * dh,
                                            static_cast<int64_t>(khi) * dh);
                TensorT<T> wv_c = col_slice(lp.wv, static_cast<int64_t>(klo) * dh,
                                            static_cast<int64_t>(khi) * dh);
                ac.q = mm_(lc.xa, wq_c, {"wq", l, r, MmMode::NN});
                ac.k = mm_(lc.xa, wk_c, {"wk", l, r, MmMode::NN});
                ac.v = mm_(lc.xa, wv_c, {"wv", l, r, MmMode::NN});
                maybe_round(ac.q);
                maybe_round(ac.k);
                maybe_round(ac.v);
                ac.att = TensorT<T>({cfg_.seq_len, static_cast<int64_t>(hpr) * dh});
                ac.probs.resize(static_cast<size_t>(hpr));
                for (int hl = 0; hl < hpr; ++hl) {
                    const int h = r * hpr + hl;
                    const int kvl = h / group - klo;
                    TensorT<T> qh = col_slice(ac.q, static_cast<int64_t>(hl) * dh,
                                              static_cast<int64_t>(hl + 1) * dh);
                    TensorT<T> kh = col_slice(ac.k, static_cast<int64_t>(kvl) * dh,
                                              static_cast<int64_t>(kvl + 1) * dh);
                    TensorT<T> vh = col_slice(ac.v, static_cast<int64_t>(kvl) * dh,
                                              static_cast<int64_t>(kvl + 1) * dh);
                    TensorT<T> scores = scale(matmul_nt(qh, kh), static_cast<T>(inv_sqrt_dh));
                    maybe_round(scores);
                    TensorT<T> probs = causal_softmax(scores);
                    maybe_round(probs);
                    TensorT<T> ctx = matmul(probs, vh);
                    maybe_round(ctx);
                    for (int64_t i = 0; i < ctx.dim(0); ++i)
                        for (int64_t j = 0; j < dh; ++j)
                            ac.att.at(i, static_cast<int64_t>(hl) * dh + j) = ctx.at(i, j);
                    ac.probs[static_cast<size_t>(hl)] = std::move(probs);
                }
                TensorT<T> wo_r = row_slice(lp.wo, static_cast<int64_t>(r) * hpr * dh,
                                            static_cast<int64_t>(r + 1) * hpr * dh);
                TensorT<T> part = mm_(ac.att, wo_r, {"wo", l, r, MmMode::NN});
                maybe_round(part);
                partial[static_cast<size_t>(b)][static_cast<size_t>(r)] = std::move(part);
            }
        }
        for (int r = 0; r < R; ++r) {
            std::vector<TensorT<T>*> ptrs;
            for (int b = 0; b < MBS; ++b)
                ptrs.push_back(&partial[static_cast<size_t>(b)][static_cast<size_t>(r)]);
            fire_hook(HookKind::fwd_attn, l, r, ptrs);
        }
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            auto& lc = sc.layers[static_cast<size_t>(l)];
            auto shards = collectives::reduce_scatter(partial[static_cast<size_t>(b)]);
            lc.x_mid.resize(static_cast<size_t>(R));
            lc.xhat1.resize(static_cast<size_t>(R));
            lc.ln1.resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                maybe_round(shards[static_cast<size_t>(r)]);
                TensorT<T> z = add(lc.x_in[static_cast<size_t>(r)], shards[static_cast<size_t>(r)]);
                maybe_round(z);
                lc.x_mid[static_cast<size_t>(r)] =
                    layer_norm(z, lp.ln1_g, lp.ln1_b, &lc.xhat1[static_cast<size_t>(r)],
                               &lc.ln1[static_cast<size_t>(r)]);
                maybe_round(lc.x_mid[static_cast<size_t>(r)]);
            }
        }

        // FFN.
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            auto& lc = sc.layers[static_cast<size_t>(l)];
            lc.xg = collectives::all_gather(lc.x_mid);
            lc.ffn.resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                auto& fc = lc.ffn[static_cast<size_t>(r)];
                TensorT<T> wg_c = col_slice(lp.wg, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                TensorT<T> wu_c = col_slice(lp.wu, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                fc.g = mm_(lc.xg, wg_c, {"wg", l, r, MmMode::NN});
                fc.u = mm_(lc.xg, wu_c, {"wu", l, r, MmMode::NN});
                maybe_round(fc.g);
                maybe_round(fc.u);
                fc.sw = swish(fc.g);
                maybe_round(fc.sw);
                fc.s = hadamard(fc.sw, fc.u);
                maybe_round(fc.s);
                TensorT<T> wd_r = row_slice(lp.wd, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                TensorT<T> part = mm_(fc.s, wd_r, {"wd", l, r, MmMode::NN});
                maybe_round(part);
                partial[static_cast<size_t>(b)][static_cast<size_t>(r)] = std::move(part);
            }
        }
        for (int r = 0; r < R; ++r) {
            std::vector<TensorT<T>*> ptrs;
            for (int b = 0; b < MBS; ++b)
                ptrs.push_back(&partial[static_cast<size_t>(b)][static_cast<size_t>(r)]);
            fire_hook(HookKind::fwd_ffn, l, r, ptrs);
        }
        for (int b = 0; b < MBS; ++b) {
            auto& sc = samples_[static_cast<size_t>(b)];
            auto& lc = sc.layers[static_cast<size_t>(l)];
            auto shards = collectives::reduce_scatter(partial[static_cast<size_t>(b)]);
            lc.xhat2.resize(static_cast<size_t>(R));
            lc.ln2.resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r) {
                maybe_round(shards[static_cast<size_t>(r)]);
                TensorT<T> z =
                    add(lc.x_mid[static_cast<size_t>(r)], shards[static_cast<size_t>(r)]);
                maybe_round(z);
                sc.x_final[static_cast<size_t>(r)] =
                    layer_norm(z, lp.ln2_g, lp.ln2_b, &lc.xhat2[static_cast<size_t>(r)],
                               &lc.ln2[static_cast<size_t>(r)]);
                maybe_round(sc.x_final[static_cast<size_t>(r)]);
            }
        }
    }

    // dout -> dz for one layer-norm site; accumulates gain/bias grads.
    TensorT<T> layer_norm_backward(const TensorT<T>& dout, const TensorT<T>& xhat,
                                   const LayerNormCache& ln, const TensorT<T>& gain,
                                   TensorT<T>& dgain, TensorT<T>& dbias) {
        const int64_t rows = dout.dim(0), cols = dout.dim(1);
        TensorT<T> dz({rows, cols});
        for (int64_t i = 0; i < rows; ++i) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                const double dxh =
                    static_cast<double>(dout.at(i, j)) * static_cast<double>(gain.at(j));
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * static_cast<double>(xhat.at(i, j));
            }
            const double m1 = sum_dxhat / static_cast<double>(cols);
            const double m2 = sum_dxhat_xhat / static_cast<double>(cols);
            const double rstd = ln.rstd[static_cast<size_t>(i)];
            for (int64_t j = 0; j < cols; ++j) {
                const double dxh =
                    static_cast<double>(dout.at(i, j)) * static_cast<double>(gain.at(j));
                dz.at(i, j) = static_cast<T>(
                    rstd * (dxh - m1 - static_cast<double>(xhat.at(i, j)) * m2));
                dgain.at(j) += static_cast<T>(static_cast<double>(dout.at(i, j)) *
                                              static_cast<double>(xhat.at(i, j)));
                dbias.at(j) += dout.at(i, j);
            }
        }
        return dz;
    }

    void layer_backward(int l, std::vector<std::vector<TensorT<T>>>& dx, ParamsT<T>& grads) {
        const int R = cfg_.tp_degree, MBS = cfg_.micro_batch;
        const int hpr = cfg_.heads / R, dh = cfg_.head_dim();
        const int group = cfg_.heads / cfg_.kv_heads;
        const int Fr = cfg_.ffn_dim() / R;
        const auto& lp = params_.layers[static_cast<size_t>(l)];
        auto& gp = grads.layers[static_cast<size_t>(l)];
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<std::vector<TensorT<T>>> dz2(static_cast<size_t>(MBS)),
            dz1(static_cast<size_t>(MBS)), dgrad(static_cast<size_t>(MBS));

        // FFN backward.
        for (int b = 0; b < MBS; ++b) {
            auto& lc = samples_[static_cast<size_t>(b)].layers[static_cast<size_t>(l)];
            dz2[static_cast<size_t>(b)].resize(static_cast<size_t>(R));
            dgrad[static_cast<size_t>(b)].resize(static_cast<size_t>(R));
            for (int r = 0; r < R; ++r)
                dz2[static_cast<size_t>(b)][static_cast<size_t>(r)] = layer_norm_backward(
                    dx[static_cast<size_t>(b)][static_cast<size_t>(r)],
                    lc.xhat2[static_cast<size_t>(r)], lc.ln2[static_cast<size_t>(r)], lp.ln2_g,
                    gp.ln2_g, gp.ln2_b);
            TensorT<T> dy_full = collectives::all_gather(dz2[static_cast<size_t>(b)]);
            for (int r = 0; r < R; ++r) {
                const auto& fc = lc.ffn[static_cast<size_t>(r)];
                TensorT<T> wd_r = row_slice(lp.wd, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                TensorT<T> ds = mm_(dy_full, wd_r, {"wd_dx", l, r, MmMode::NT});
                add_into_rows(gp.wd, static_cast<int64_t>(r) * Fr,
                              mm_(fc.s, dy_full, {"wd_dw", l, r, MmMode::TN}));
                TensorT<T> du = hadamard(ds, fc.sw);
                TensorT<T> dg(fc.g.shape());
                for (int64_t i = 0; i < dg.size(); ++i) {
                    const T x = fc.g.at(i);
                    const T sig = sigmoid_scalar(x);
                    const T swp = sig * (T(1) + x * (T(1) - sig));
                    dg.at(i) = ds.at(i) * fc.u.at(i) * swp;
                }
                TensorT<T> wg_c = col_slice(lp.wg, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                TensorT<T> wu_c = col_slice(lp.wu, static_cast<int64_t>(r) * Fr,
                                            static_cast<int64_t>(r + 1) * Fr);
                TensorT<T> dxg = mm_(dg, wg_c, {"wg_dx", l, r, MmMode::NT});
                add_inplace(dxg, mm_(du, wu_c, {"wu_dx", l, r, MmMode::NT}));
                add_into_cols(gp.wg, static_cast<int64_t>(r) * Fr,
                              mm_(lc.xg, dg, {"wg_dw", l, r, MmMode::TN}));
                add_into_cols(gp.wu, static_cast<int64_t>(r) * Fr,
                              mm_(lc.xg, du, {"wu_dw", l, r, MmMode::TN}));
                dgrad[static_cast<size_t>(b)][static_cast<size_t>(r)] = std::move(dxg);
            }
        }
        for (int r = 0; r < R; ++r) {
            std::vector<TensorT<T>*> ptrs;
            for (int b = 0; b < MBS; ++b)
                ptrs.push_back(&dgrad[static_cast<size_t>(b)][static_cast<size_t>(r)]);
            fire_hook(HookKind::bwd_ffn, l, r, ptrs);
        }
        for (int b = 0; b < MBS; ++b) {
            auto shards = collectives::reduce_scatter(dgrad[static_cast<size_t>(b)]);
            dz1[static_cast<size_t>(b)].resize(static_cast<size_t>(R));
            auto& lc = samples_[static_cast<size_t>(b)].layers[static_cast<size_t>(l)];
            for (int r = 0; r < R; ++r) {
                TensorT<T> dmid =
                    add(dz2[static_cast<size_t>(b)][static_cast<size_t>(r)],
                        shards[static_cast<size_t>(r)]);
                dz1[static_cast<size_t>(b)][static_cast<size_t>(r)] = layer_norm_backward(
                    dmid, lc.xhat1[static_cast<size_t>(r)], lc.ln1[static_cast<size_t>(r)],
                    lp.ln1_g, gp.ln1_g, gp.ln1_b);
            }
        }

        // Attention backward.
        for (int b = 0; b < MBS; ++b) {
            auto& lc = samples_[static_cast<size_t>(b)].layers[static_cast<size_t>(l)];
            TensorT<T> dy_full = collectives::all_gather(dz1[static_cast<size_t>(b)]);
            for (int r = 0; r < R; ++r) {
                const auto& ac = lc.attn[static_cast<size_t>(r)];
                int klo, khi;
                kv_range(r, &klo, &khi);
                TensorT<T> wo_r = row_slice(lp.wo, static_cast<int64_t>(r) * hpr * dh,
                                            static_cast<int64_t>(r + 1) * hpr * dh);
                TensorT<T> datt = mm_(dy_full, wo_r, {"wo_dx", l, r, MmMode::NT});
                add_into_rows(gp.wo, static_cast<int64_t>(r) * hpr * dh,
                              mm_(ac.att, dy_full, {"wo_dw", l, r, MmMode::TN}));
                TensorT<T> dq(ac.q.shape()), dk(ac.k.shape()), dv(ac.v.shape());
                for (int hl = 0; hl < hpr; ++hl) {
                    const int h = r * hpr + hl;
                    const int kvl = h / group - klo;
                    TensorT<T> dctx = col_slice(datt, static_cast<int64_t>(hl) * dh,
                                                static_cast<int64_t>(hl + 1) * dh);
                    TensorT<T> qh = col_slice(ac.q, static_cast<int64_t>(hl) * dh,
                                              static_cast<int64_t>(hl + 1) * dh);
                    TensorT<T> kh = col_slice(ac.k, static_cast<int64_t>(kvl) * dh,
                                              static_cast<int64_t>(kvl + 1) * dh);
                    TensorT<T> vh = col_slice(ac.v, static_cast<int64_t>(kvl) * dh,
                                              static_cast<int64_t>(kvl + 1) * dh);
                    const auto& probs = ac.probs[static_cast<size_t>(hl)];
                    TensorT<T> dprobs = matmul_nt(dctx, vh);
                    add_into_cols(dv, static_cast<int64_t>(kvl) * dh, matmul_tn(probs, dctx));
                    // softmax backward over the causal prefix
                    TensorT<T> dscores(probs.shape());
                    for (int64_t i = 0; i < probs.dim(0); ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j <= i; ++j)
                            dot += static_cast<double>(dprobs.at(i, j)) *
                                   static_cast<double>(probs.at(i, j));
                        for (int64_t j = 0; j <= i; ++j)
                            dscores.at(i, j) = static_cast<T>(
                                static_cast<double>(probs.at(i, j)) *
                                (static_cast<double>(dprobs.at(i, j)) - dot) * inv_sqrt_dh);
                    }
                    add_into_cols(dq, static_cast<int64_t>(hl) * dh, matmul(dscores, kh));
                    add_into_cols(dk, static_cast<int64_t>(kvl) * dh, matmul_tn(dscores, qh));
                }
                TensorT<T> wq_c = col_slice(lp.wq, static_cast<int64_t>(r) * hpr * dh,
                                            static_cast<int64_t>(r + 1) * hpr * dh);
                TensorT<T> wk_c = col_slice(lp.wk, static_cast<int64_t>(klo) * dh,
                                            static_cast<int64_t>(khi) * dh);
                TensorT<T> wv_c = col_slice(lp.wv, static_cast<int64_t>(klo) * dh,
                                            static_cast<int64_t>(khi) * dh);
                TensorT<T> dxa = mm_(dq, wq_c, {"wq_dx", l, r, MmMode::NT});
                add_inplace(dxa, mm_(dk, wk_c, {"wk_dx", l, r, MmMode::NT}));
                add_inplace(dxa, mm_(dv, wv_c, {"wv_dx", l, r, MmMode::NT}));
                add_into_cols(gp.wq, static_cast<int64_t>(r) * hpr * dh,
                              mm_(lc.xa, dq, {"wq_dw", l, r, MmMode::TN}));
                add_into_cols(gp.wk, static_cast<int64_t>(klo) * dh,
                              mm_(lc.xa, dk, {"wk_dw", l, r, MmMode::TN}));
                add_into_cols(gp.wv, static_cast<int64_t>(klo) * dh,
                              mm_(lc.xa, dv, {"wv_dw", l, r, MmMode::TN}));
                dgrad[static_cast<size_t>(b)][static_cast<size_t>(r)] = std::move(dxa);
            }
        }
        for (int r = 0; r < R; ++r) {
            std::vector<TensorT<T>*> ptrs;
            for (int b = 0; b < MBS; ++b)
                ptrs.push_back(&dgrad[static_cast<size_t>(b)][static_cast<size_t>(r)]);
            fire_hook(HookKind::bwd_attn, l, r, ptrs);
        }
        for (int b = 0; b < MBS; ++b) {
            auto shards = collectives::reduce_scatter(dgrad[static_cast<size_t>(b)]);
            for (int r = 0; r < R; ++r)
                dx[static_cast<size_t>(b)][static_cast<size_t>(r)] =
                    add(dz1[static_cast<size_t>(b)][static_cast<size_t>(r)],
                        shards[static_cast<size_t>(r)]);
        }
    }

    ModelConfig cfg_;
    const ParamsT<T>& params_;
    HookFn<T> hook_;
    MatmulFn<T> mm_;
    std::vector<detail::SampleCacheT<T>> samples_;
    double loss_ = 0.0;
};

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double warmup_frac = 0.02;
    int64_t schedule_steps = 0;  // 0: use the run's step count
};

/// Linear warmup then cosine annealing to zero.
inline double lr_at(const OptimizerConfig& opt, int64_t step, int64_t total_steps) {
    const int64_t total = opt.schedule_steps > 0 ? opt.schedule_steps : total_steps;
    const int64_t warmup =
        std::max<int64_t>(1, static_cast<int64_t>(opt.warmup_frac * static_cast<double>(total)));
    if (step < warmup)
        return opt.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return opt.lr;
    const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return opt.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(t, 1.0)));
}

template <typename T>
struct AdamStateT {
    ParamsT<T> m, v;
    int64_t t = 0;
};

template <typename T>
AdamStateT<T> make_adam_state(const ModelConfig& cfg) {
    return {zeros_like_params<T>(cfg), zeros_like_params<T>(cfg), 0};
}

/// Global-norm clipping to clip_norm, then L2 weight decay added to the
/// gradients, then a bias-corrected Adam update. Mutates grads (clip + decay).
template <typename T>
void adam_step(ParamsT<T>& params, ParamsT<T>& grads, AdamStateT<T>& state,
               const OptimizerConfig& opt, double lr) {
    double sq = 0.0;
    grads.for_each([&](const std::string&, TensorT<T>& g) {
        for (int64_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(g.at(i));
            sq += v * v;
        }
    });
    const double gnorm = std::sqrt(sq);
    if (opt.clip_norm > 0.0 && gnorm > opt.clip_norm) {
        const T s = static_cast<T>(opt.clip_norm / gnorm);
        grads.for_each([&](const std::string&, TensorT<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) g.at(i) *= s;
        });
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
    std::vector<TensorT<T>*> ps, gs, ms, vs;
    params.for_each([&](const std::string&, TensorT<T>& t) { ps.push_back(&t); });
    grads.for_each([&](const std::string&, TensorT<T>& t) { gs.push_back(&t); });
    state.m.for_each([&](const std::string&, TensorT<T>& t) { ms.push_back(&t); });
    state.v.for_each([&](const std::string&, TensorT<T>& t) { vs.push_back(&t); });
    for (size_t k = 0; k < ps.size(); ++k) {
        TensorT<T>& p = *ps[k];
        TensorT<T>& g = *gs[k];
        TensorT<T>& m = *ms[k];
        TensorT<T>& v = *vs[k];
        for (int64_t i = 0; i < p.size(); ++i) {
            const double gi =
                static_cast<double>(g.at(i)) + opt.weight_decay * static_cast<double>(p.at(i));
            const double mi = opt.beta1 * static_cast<double>(m.at(i)) + (1.0 - opt.beta1) * gi;
            const double vi = opt.beta2 * static_cast<double>(v.at(i)) + (1.0 - opt.beta2) * gi * gi;
            m.at(i) = static_cast<T>(mi);
            v.at(i) = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double upd = lr * mhat / (std::sqrt(vhat) + opt.eps);
            if (!std::isfinite(upd)) throw NumericalFailure("non-finite Adam update");
            p.at(i) = static_cast<T>(static_cast<double>(p.at(i)) - upd);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter snapshots: flat binary of 32-bit little-endian reals plus a JSON
// sidecar listing tensor names/shapes/offsets.

inline void save_params(const ParamsT<float>& params, const std::string& prefix) {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw ContractViolation("cannot open snapshot file " + prefix + ".bin");
    nlohmann::json sidecar = nlohmann::json::array();
    int64_t offset = 0;
    params.for_each([&](const std::string& name, const TensorT<float>& t) {
        bin.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
        sidecar.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size() * static_cast<int64_t>(sizeof(float));
    });
    std::ofstream js(prefix + ".json");
    js << sidecar.dump(2) << "\n";
}

inline void load_params(ParamsT<float>& params, const std::string& prefix) {
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw ContractViolation("cannot open snapshot file " + prefix + ".bin");
    params.for_each([&](const std::string&, TensorT<float>& t) {
        bin.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!bin) throw ContractViolation("snapshot file truncated: " + prefix + ".bin");
    });
}

}  // namespace sdclab
