#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "microformer/rng.hpp"
#include "microformer/tensor.hpp"

namespace microformer {

enum class AttentionVariant { kSoftmax, kSoftmaxPlusOne };
enum class NormVariant { kLayerNorm, kRmsNormPerChannel, kRmsNormSingle };
enum class PositionVariant { kLearnedAbsolute, kNone };

constexpr double kNormEps = 1e-5;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 256;
    int max_seq_len = 256;
    AttentionVariant attention = AttentionVariant::kSoftmax;
    NormVariant norm = NormVariant::kLayerNorm;
    PositionVariant positions = PositionVariant::kLearnedAbsolute;
    bool use_biases = true;
    int causal_relax_k = 0;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 || max_seq_len <= 0)
            throw std::invalid_argument("model config: all size fields must be positive");
        if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        if (causal_relax_k < 0 || causal_relax_k > max_seq_len)
            throw std::invalid_argument("model config: causal_relax_k must lie in [0, max_seq_len]");
    }
};

// ---- fused network ops -----------------------------------------------------

// Row-wise softmax over an arbitrary key mask. allowed is row-major [rows x cols],
// nonzero meaning the key participates. Masked outputs are exactly zero.
inline Tensor softmax_rows(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& allowed,
                           AttentionVariant variant) {
    if (x.ndim() != 2) throw std::invalid_argument("softmax_rows: expected a 2-d tensor");
    const int rows = x.dim(0), cols = x.dim(1);
    if (static_cast<std::int64_t>(allowed.size()) != static_cast<std::int64_t>(rows) * cols)
        throw std::invalid_argument("softmax_rows: mask size mismatch");
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.payload();
    auto od = out.payload();
    for (int r = 0; r < rows; ++r) {
        const double* xr = xd->data.data() + static_cast<std::size_t>(r) * cols;
        const std::uint8_t* ar = allowed.data() + static_cast<std::size_t>(r) * cols;
        double* or_ = od->data.data() + static_cast<std::size_t>(r) * cols;
        double mmax = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < cols; ++c)
            if (ar[c]) mmax = std::max(mmax, xr[c]);
        if (mmax == -std::numeric_limits<double>::infinity()) {
            if (variant == AttentionVariant::kSoftmax)
                throw std::runtime_error("softmax_rows: all keys masked in a row under canonical softmax");
            continue;  // softmax-1 attends nowhere: row stays zero
        }
        const double m = variant == AttentionVariant::kSoftmaxPlusOne ? std::max(0.0, mmax) : mmax;
        double denom = variant == AttentionVariant::kSoftmaxPlusOne ? std::exp(-m) : 0.0;
        for (int c = 0; c < cols; ++c)
            if (ar[c]) denom += std::exp(xr[c] - m);
        for (int c = 0; c < cols; ++c)
            if (ar[c]) or_[c] = std::exp(xr[c] - m) / denom;
    }
    check_finite("softmax_rows", *od);
    if (tape.recording() && xd->requires_grad) {
        od->requires_grad = true;
        tape.record("softmax_rows", od, [xd, od, rows, cols]() {
            if (od->grad.empty()) return;
            if (xd->grad.empty()) xd->grad.assign(xd->data.size(), 0.0);
            for (int r = 0; r < rows; ++r) {
                const double* p = od->data.data() + static_cast<std::size_t>(r) * cols;
                const double* g = od->grad.data() + static_cast<std::size_t>(r) * cols;
                double* gx = xd->grad.data() + static_cast<std::size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += p[c] * g[c];
                // same rule for both variants: dx_j = p_j (g_j - sum_k p_k g_k)
                for (int c = 0; c < cols; ++c) gx[c] += p[c] * (g[c] - dot);
            }
        });
    }
    return out;
}

// Softmax over causally masked attention logits. Accepts [L, L] or any
// [..., L, L]; query rows below relax_k see every key, the rest see keys <= query.
inline Tensor softmax_causal(Tape& tape, const Tensor& logits, AttentionVariant variant, int relax_k) {
    if (logits.ndim() < 2) throw std::invalid_argument("softmax_causal: rank must be >= 2");
    const int nd = logits.ndim();
    const int L = logits.dim(nd - 1);
    if (logits.dim(nd - 2) != L) throw std::invalid_argument("softmax_causal: logits must be square per slice");
    if (relax_k < 0) throw std::invalid_argument("softmax_causal: negative relax_k");
    std::int64_t slices = 1;
    for (int i = 0; i < nd - 2; ++i) slices *= logits.dim(i);

    Tensor out = Tensor::zeros(logits.shape());
    auto xd = logits.payload();
    auto od = out.payload();
    const std::size_t ss = static_cast<std::size_t>(L) * L;
    for (std::int64_t s = 0; s < slices; ++s) {
        const double* xs = xd->data.data() + s * ss;
        double* os = od->data.data() + s * ss;
        for (int i = 0; i < L; ++i) {
            const int visible = i < relax_k ? L : i + 1;
            const double* xr = xs + static_cast<std::size_t>(i) * L;
            double* por = os + static_cast<std::size_t>(i) * L;
            double mmax = xr[0];
            for (int j = 1; j < visible; ++j) mmax = std::max(mmax, xr[j]);
            const double m = variant == AttentionVariant::kSoftmaxPlusOne ? std::max(0.0, mmax) : mmax;
            double denom = variant == AttentionVariant::kSoftmaxPlusOne ? std::exp(-m) : 0.0;
            for (int j = 0; j < visible; ++j) denom += std::exp(xr[j] - m);
            for (int j = 0; j < visible; ++j) por[j] = std::exp(xr[j] - m) / denom;
        }
    }
    check_finite("softmax_causal", *od);
    if (tape.recording() && xd->requires_grad) {
        od->requires_grad = true;
        tape.record("softmax_causal", od, [xd, od, slices, L, ss]() {
            if (od->grad.empty()) return;
            if (xd->grad.empty()) xd->grad.assign(xd->data.size(), 0.0);
            for (std::int64_t s = 0; s < slices; ++s) {
                for (int i = 0; i < L; ++i) {
                    const double* p = od->data.data() + s * ss + static_cast<std::size_t>(i) * L;
                    const double* g = od->grad.data() + s * ss + static_cast<std::size_t>(i) * L;
                    double* gx = xd->grad.data() + s * ss + static_cast<std::size_t>(i) * L;
                    double dot = 0.0;
                    for (int j = 0; j < L; ++j) dot += p[j] * g[j];
                    for (int j = 0; j < L; ++j) gx[j] += p[j] * (g[j] - dot);
                }
            }
        });
    }
    return out;
}

// Normalization over the last axis. gamma is [D] (LayerNorm, per-channel RMS)
// or [1] (single-scale RMS); beta is optional and only used by LayerNorm.
inline Tensor normalize(Tape& tape, const Tensor& x, NormVariant variant, const Tensor& gamma, const Tensor& beta) {
    const int nd = x.ndim();
    const int D = x.dim(nd - 1);
    const std::int64_t rows = x.numel() / D;
    const bool single = variant == NormVariant::kRmsNormSingle;
    if (single) {
        if (gamma.numel() != 1) throw std::invalid_argument("normalize: single-scale rmsnorm expects scalar gamma");
    } else if (gamma.numel() != D) {
        throw std::invalid_argument("normalize: gamma length must equal the feature dimension");
    }
    if (variant != NormVariant::kLayerNorm && beta.defined())
        throw std::invalid_argument("normalize: beta is only valid for layernorm");
    if (beta.defined() && beta.numel() != D) throw std::invalid_argument("normalize: beta length mismatch");

    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.payload();
    auto gd = gamma.payload();
    auto bd = beta.defined() ? beta.payload() : nullptr;
    auto od = out.payload();

    // per-row mean (layernorm) or rms; saved for backward
    auto stat1 = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));  // mean / unused
    auto stat2 = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));  // 1/sqrt(var+eps) or 1/rms

    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd->data.data() + r * D;
        double* orow = od->data.data() + r * D;
        if (variant == NormVariant::kLayerNorm) {
            double mean = 0.0;
            for (int d = 0; d < D; ++d) mean += xr[d];
            mean /= D;
            double var = 0.0;
            for (int d = 0; d < D; ++d) {
                double dv = xr[d] - mean;
                var += dv * dv;
            }
            var /= D;
            double inv = 1.0 / std::sqrt(var + kNormEps);
            (*stat1)[static_cast<std::size_t>(r)] = mean;
            (*stat2)[static_cast<std::size_t>(r)] = inv;
            for (int d = 0; d < D; ++d) {
                double xhat = (xr[d] - mean) * inv;
                orow[d] = xhat * gd->data[static_cast<std::size_t>(d)] +
                          (bd ? bd->data[static_cast<std::size_t>(d)] : 0.0);
            }
        } else {
            double ms = 0.0;
            for (int d = 0; d < D; ++d) ms += xr[d] * xr[d];
            double inv = 1.0 / std::sqrt(ms / D + kNormEps);
            (*stat2)[static_cast<std::size_t>(r)] = inv;
            for (int d = 0; d < D; ++d)
                orow[d] = xr[d] * inv * (single ? gd->data[0] : gd->data[static_cast<std::size_t>(d)]);
        }
    }
    check_finite("normalize", *od);

    const bool needs = xd->requires_grad || gd->requires_grad || (bd && bd->requires_grad);
    if (tape.recording() && needs) {
        od->requires_grad = true;
        tape.record("normalize", od, [xd, gd, bd, od, stat1, stat2, variant, single, rows, D]() {
            if (od->grad.empty()) return;
            if (xd->requires_grad && xd->grad.empty()) xd->grad.assign(xd->data.size(), 0.0);
            if (gd->requires_grad && gd->grad.empty()) gd->grad.assign(gd->data.size(), 0.0);
            if (bd && bd->requires_grad && bd->grad.empty()) bd->grad.assign(bd->data.size(), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xr = xd->data.data() + r * D;
                const double* g = od->grad.data() + r * D;
                if (variant == NormVariant::kLayerNorm) {
                    const double mean = (*stat1)[static_cast<std::size_t>(r)];
                    const double inv = (*stat2)[static_cast<std::size_t>(r)];
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int d = 0; d < D; ++d) {
                        double xhat = (xr[d] - mean) * inv;
                        double dxhat = g[d] * gd->data[static_cast<std::size_t>(d)];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if (gd->requires_grad) gd->grad[static_cast<std::size_t>(d)] += g[d] * xhat;
                        if (bd && bd->requires_grad) bd->grad[static_cast<std::size_t>(d)] += g[d];
                    }
                    if (xd->requires_grad) {
                        double* gx = xd->grad.data() + r * D;
                        for (int d = 0; d < D; ++d) {
                            double xhat = (xr[d] - mean) * inv;
                            double dxhat = g[d] * gd->data[static_cast<std::size_t>(d)];
                            gx[d] += inv * (dxhat - sum_dxhat / D - xhat * sum_dxhat_xhat / D);
                        }
                    }
                } else {
                    const double inv = (*stat2)[static_cast<std::size_t>(r)];
                    double dot = 0.0;  // sum_d g_d * gamma_d * x_d
                    for (int d = 0; d < D; ++d) {
                        double gam = single ? gd->data[0] : gd->data[static_cast<std::size_t>(d)];
                        dot += g[d] * gam * xr[d];
                        if (gd->requires_grad) gd->grad[single ? 0 : static_cast<std::size_t>(d)] += g[d] * xr[d] * inv;
                    }
                    if (xd->requires_grad) {
                        double* gx = xd->grad.data() + r * D;
                        const double c = dot * inv * inv * inv / D;
                        for (int d = 0; d < D; ++d) {
                            double gam = single ? gd->data[0] : gd->data[static_cast<std::size_t>(d)];
                            gx[d] += g[d] * gam * inv - xr[d] * c;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Token embedding gather: table [V, D], ids length B*L, output [B, L, D].
inline Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int>& ids, int batch, int seq_len) {
    const int V = table.dim(0), D = table.dim(1);
    if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(batch) * seq_len)
        throw std::invalid_argument("embedding: id count mismatch");
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::invalid_argument("embedding: token id " + std::to_string(id) + " outside vocab of " +
                                        std::to_string(V));
    Tensor out = Tensor::zeros({batch, seq_len, D});
    auto td = table.payload();
    auto od = out.payload();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(td->data.data() + static_cast<std::size_t>(ids[i]) * D, D, od->data.data() + i * D);
    if (tape.recording() && td->requires_grad) {
        od->requires_grad = true;
        tape.record("embedding", od, [td, od, ids, D]() {
            if (od->grad.empty()) return;
            if (td->grad.empty()) td->grad.assign(td->data.size(), 0.0);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* g = od->grad.data() + i * D;
                double* dst = td->grad.data() + static_cast<std::size_t>(ids[i]) * D;
                for (int d = 0; d < D; ++d) dst[d] += g[d];
            }
        });
    }
    return out;
}

// Mean NLL over positions >= relax_k. logits: [B, L, V] or [L, V]; the final
// LM head always uses canonical softmax, which lives inside this loss.
inline Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, const std::vector<int>& targets, int relax_k) {
    const int nd = logits.ndim();
    if (nd != 2 && nd != 3) throw std::invalid_argument("cross_entropy_loss: logits must be [L,V] or [B,L,V]");
    const int B = nd == 3 ? logits.dim(0) : 1;
    const int L = logits.dim(nd - 2);
    const int V = logits.dim(nd - 1);
    if (static_cast<std::int64_t>(targets.size()) != static_cast<std::int64_t>(B) * L)
        throw std::invalid_argument("cross_entropy_loss: target count mismatch");
    if (relax_k < 0) throw std::invalid_argument("cross_entropy_loss: negative relax_k");
    if (relax_k >= L) throw std::runtime_error("cross_entropy_loss: every position is excluded from the loss");
    for (int t : targets)
        if (t < 0 || t >= V) throw std::invalid_argument("cross_entropy_loss: target outside vocab");

    auto xd = logits.payload();
    const std::int64_t count = static_cast<std::int64_t>(B) * (L - relax_k);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        for (int l = relax_k; l < L; ++l) {
            const double* row = xd->data.data() + (static_cast<std::size_t>(b) * L + l) * V;
            double m = row[0];
            for (int v = 1; v < V; ++v) m = std::max(m, row[v]);
            double sum = 0.0;
            for (int v = 0; v < V; ++v) sum += std::exp(row[v] - m);
            total += m + std::log(sum) - row[targets[static_cast<std::size_t>(b) * L + l]];
        }
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(count));
    auto od = out.payload();
    check_finite("cross_entropy_loss", *od);
    if (tape.recording() && xd->requires_grad) {
        od->requires_grad = true;
        tape.record("cross_entropy_loss", od, [xd, od, targets, B, L, V, relax_k, count]() {
            if (od->grad.empty()) return;
            if (xd->grad.empty()) xd->grad.assign(xd->data.size(), 0.0);
            const double gscale = od->grad[0] / static_cast<double>(count);
            for (int b = 0; b < B; ++b) {
                for (int l = relax_k; l < L; ++l) {
                    const std::size_t off = (static_cast<std::size_t>(b) * L + l) * V;
                    const double* row = xd->data.data() + off;
                    double* gx = xd->grad.data() + off;
                    double m = row[0];
                    for (int v = 1; v < V; ++v) m = std::max(m, row[v]);
                    double sum = 0.0;
                    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - m);
                    for (int v = 0; v < V; ++v) gx[v] += gscale * std::exp(row[v] - m) / sum;
                    gx[targets[static_cast<std::size_t>(b) * L + l]] -= gscale;
                }
            }
        });
    }
    return out;
}

// ---- model -----------------------------------------------------------------

struct Param {
    std::string name;
    Tensor value;
};

// Per-layer snapshots from one forward pass. hidden_states[m] is [B, L, D],
// taken right after the MLP residual add; attention_maps[m] is [B, H, L, L].
struct CaptureBuffers {
    std::vector<Tensor> hidden_states;
    std::vector<Tensor> attention_maps;
    int batch = 0;
    int seq_len = 0;
};

// Hook the quantization module installs to fake-quantize activations at
// linear-layer boundaries. is_output marks a linear output (coarse preset).
using ActQuantHook = std::function<Tensor(Tape&, const Tensor&, bool is_output)>;

class Model {
  public:
    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0x6d6f64656cull));  // independent stream per model
        auto gaussian = [&](const std::string& name, Shape shape) {
            Tensor t = Tensor::zeros(shape, true);
            for (double& v : t.data()) v = 0.02 * rng.next_gaussian();
            params_.push_back({name, t});
        };
        auto constant = [&](const std::string& name, Shape shape, double value) {
            params_.push_back({name, Tensor::filled(std::move(shape), value, true)});
        };
        auto norm_params = [&](const std::string& prefix) {
            if (cfg_.norm == NormVariant::kRmsNormSingle)
                constant(prefix + ".gamma", {1}, 1.0);
            else
                constant(prefix + ".gamma", {cfg_.d_model}, 1.0);
            if (cfg_.norm == NormVariant::kLayerNorm && cfg_.use_biases)
                constant(prefix + ".beta", {cfg_.d_model}, 0.0);
        };

        gaussian("tok_emb", {cfg_.vocab_size, cfg_.d_model});
        if (cfg_.positions == PositionVariant::kLearnedAbsolute)
            gaussian("pos_emb", {cfg_.max_seq_len, cfg_.d_model});
        for (int m = 0; m < cfg_.n_layers; ++m) {
            const std::string p = "layers." + std::to_string(m);
            norm_params(p + ".norm1");
            gaussian(p + ".attn.wq", {cfg_.d_model, cfg_.d_model});
            gaussian(p + ".attn.wk", {cfg_.d_model, cfg_.d_model});
            gaussian(p + ".attn.wv", {cfg_.d_model, cfg_.d_model});
            gaussian(p + ".attn.wo", {cfg_.d_model, cfg_.d_model});
            if (cfg_.use_biases) {
                constant(p + ".attn.bq", {cfg_.d_model}, 0.0);
                constant(p + ".attn.bk", {cfg_.d_model}, 0.0);
                constant(p + ".attn.bv", {cfg_.d_model}, 0.0);
                constant(p + ".attn.bo", {cfg_.d_model}, 0.0);
            }
            norm_params(p + ".norm2");
            gaussian(p + ".mlp.w1", {cfg_.d_model, cfg_.d_ff});
            gaussian(p + ".mlp.w2", {cfg_.d_ff, cfg_.d_model});
            if (cfg_.use_biases) {
                constant(p + ".mlp.b1", {cfg_.d_ff}, 0.0);
                constant(p + ".mlp.b2", {cfg_.d_model}, 0.0);
            }
        }
        norm_params("final_norm");
        gaussian("lm_head.w", {cfg_.d_model, cfg_.vocab_size});
        if (cfg_.use_biases) constant("lm_head.b", {cfg_.vocab_size}, 0.0);
        index_params();
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    bool has_param(const std::string& name) const { return index_.count(name) > 0; }
    Tensor param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("model: no parameter named '" + name + "'");
        return params_[it->second].value;
    }

    void set_act_quant(ActQuantHook hook) { act_quant_ = std::move(hook); }
    const ActQuantHook& act_quant() const { return act_quant_; }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

    // tokens: row-major [batch x seq_len]. Returns logits [batch, seq_len, vocab].
    Tensor forward(Tape& tape, const std::vector<int>& tokens, int batch, int seq_len,
                   CaptureBuffers* capture = nullptr) const {
        if (seq_len <= 0 || batch <= 0) throw std::invalid_argument("forward: empty input");
        if (seq_len > cfg_.max_seq_len) throw std::invalid_argument("forward: sequence longer than max_seq_len");
        if (static_cast<std::int64_t>(tokens.size()) != static_cast<std::int64_t>(batch) * seq_len)
            throw std::invalid_argument("forward: token count mismatch");
        const int D = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.d_head();
        if (capture) {
            capture->hidden_states.clear();
            capture->attention_maps.clear();
            capture->batch = batch;
            capture->seq_len = seq_len;
        }

        Tensor x = embedding(tape, param("tok_emb"), tokens, batch, seq_len);
        if (cfg_.positions == PositionVariant::kLearnedAbsolute) {
            Tensor pos = Tensor::zeros({seq_len, D});
            const auto& pe = param("pos_emb").data();
            std::copy_n(pe.data(), static_cast<std::size_t>(seq_len) * D, pos.data().data());
            // slice of pos_emb; gradient flows through an explicit gather
            Tensor pos_slice = position_slice(tape, seq_len);
            x = add(tape, x, pos_slice);
        }

        for (int m = 0; m < cfg_.n_layers; ++m) {
            const std::string p = "layers." + std::to_string(m);
            // attention block
            Tensor xn = apply_norm(tape, x, p + ".norm1");
            Tensor flat = reshape(tape, xn, {batch * seq_len, D});
            flat = quant_in(tape, flat);
            Tensor q = linear(tape, flat, p + ".attn.wq", p + ".attn.bq");
            Tensor k = linear(tape, flat, p + ".attn.wk", p + ".attn.bk");
            Tensor v = linear(tape, flat, p + ".attn.wv", p + ".attn.bv");
            Tensor q4 = permute(tape, reshape(tape, q, {batch, seq_len, H, dh}), {0, 2, 1, 3});
            Tensor k4 = permute(tape, reshape(tape, k, {batch, seq_len, H, dh}), {0, 2, 1, 3});
            Tensor v4 = permute(tape, reshape(tape, v, {batch, seq_len, H, dh}), {0, 2, 1, 3});
            Tensor scores = scale(tape, matmul_batched(tape, q4, k4, true), 1.0 / std::sqrt(double(dh)));
            Tensor probs = softmax_causal(tape, scores, cfg_.attention, cfg_.causal_relax_k);
            if (capture) capture->attention_maps.push_back(detach_copy(probs));
            Tensor ctx = matmul_batched(tape, probs, v4);
            Tensor ctx2 = reshape(tape, permute(tape, ctx, {0, 2, 1, 3}), {batch * seq_len, D});
            ctx2 = quant_in(tape, ctx2);
            Tensor attn_out = linear(tape, ctx2, p + ".attn.wo", p + ".attn.bo");
            x = add(tape, x, reshape(tape, attn_out, {batch, seq_len, D}));

            // mlp block
            Tensor xn2 = apply_norm(tape, x, p + ".norm2");
            Tensor flat2 = reshape(tape, xn2, {batch * seq_len, D});
            flat2 = quant_in(tape, flat2);
            Tensor h = gelu(tape, linear(tape, flat2, p + ".mlp.w1", p + ".mlp.b1"));
            h = quant_in(tape, h);
            Tensor h2 = linear(tape, h, p + ".mlp.w2", p + ".mlp.b2");
            x = add(tape, x, reshape(tape, h2, {batch, seq_len, D}));
            if (capture) capture->hidden_states.push_back(detach_copy(x));
        }

        Tensor xf = apply_norm(tape, x, "final_norm");
        Tensor logits = matmul(tape, reshape(tape, xf, {batch * seq_len, D}), param("lm_head.w"));
        if (cfg_.use_biases) logits = add(tape, logits, param("lm_head.b"));
        return reshape(tape, logits, {batch, seq_len, cfg_.vocab_size});
    }

  private:
    Tensor position_slice(Tape& tape, int seq_len) const {
        Tensor table = param("pos_emb");
        std::vector<int> idx(static_cast<std::size_t>(seq_len));
        for (int i = 0; i < seq_len; ++i) idx[static_cast<std::size_t>(i)] = i;
        return embedding(tape, table, idx, 1, seq_len);  // [1, L, D] broadcasts over batch
    }

    Tensor apply_norm(Tape& tape, const Tensor& x, const std::string& prefix) const {
        Tensor beta;
        if (cfg_.norm == NormVariant::kLayerNorm && cfg_.use_biases) beta = param(prefix + ".beta");
        return normalize(tape, x, cfg_.norm, param(prefix + ".gamma"), beta);
    }

    Tensor linear(Tape& tape, const Tensor& x, const std::string& w_name, const std::string& b_name) const {
        Tensor y = matmul(tape, x, param(w_name));
        if (cfg_.use_biases) y = add(tape, y, param(b_name));
        return quant_out(tape, y);
    }

    Tensor quant_in(Tape& tape, const Tensor& x) const { return act_quant_ ? act_quant_(tape, x, false) : x; }
    Tensor quant_out(Tape& tape, const Tensor& x) const { return act_quant_ ? act_quant_(tape, x, true) : x; }

    static Tensor detach_copy(const Tensor& t) { return Tensor::from(t.shape(), t.data()); }

    void index_params() {
        index_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
    }

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
    ActQuantHook act_quant_;
};

// Greedy continuation for smoke tests: repeatedly append the argmax next token
// (ties resolve to the lowest id).
inline std::vector<int> greedy_decode(const Model& model, std::vector<int> tokens, int n_new) {
    for (int step = 0; step < n_new; ++step) {
        const int max_len = model.config().max_seq_len;
        std::vector<int> window(tokens.end() - std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len)),
                                tokens.end());
        Tape tape;
        tape.set_recording(false);
        Tensor logits = model.forward(tape, window, 1, static_cast<int>(window.size()));
        const int V = model.config().vocab_size;
        const double* row = logits.data().data() + (window.size() - 1) * static_cast<std::size_t>(V);
        int best = 0;
        for (int v = 1; v < V; ++v)
            if (row[v] > row[best]) best = v;
        tokens.push_back(best);
    }
    return tokens;
}

}  // namespace microformer
