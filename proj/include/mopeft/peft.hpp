#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mopeft/tensor.hpp"

namespace mopeft {

// Low-rank update DeltaW = B*A of rank r against a frozen d x k base weight.
// B starts at zero so a fresh attachment leaves the base forward unchanged.
struct LoraAttachment {
    Tensor A;  // [r x k]
    Tensor B;  // [d x r]
    int rank = 0;
    std::string target;  // e.g. "block2.wq"
    double alpha_base = 16.0;
};

inline LoraAttachment make_lora(int d, int k, int r, double alpha_base, std::string target,
                                std::mt19937_64& rng) {
    if (r < 1 || r > std::min(d, k))
        throw std::invalid_argument("lora rank " + std::to_string(r) + " must be in [1, min(" +
                                    std::to_string(d) + ", " + std::to_string(k) + ")]");
    LoraAttachment att;
    att.A = Tensor::randn({r, k}, rng, 0.02);
    att.B = Tensor::zeros({d, r});
    att.rank = r;
    att.target = std::move(target);
    att.alpha_base = alpha_base;
    return att;
}

inline Tensor lora_delta(const LoraAttachment& att, double s) {
    return scale(matmul(att.B, att.A), s);
}

// (W0 + s*B*A) * x evaluated as W0*x + s*B*(A*x); DeltaW is never materialized.
// The scale may be a graph-connected scalar (gate output) or a constant.
inline Tensor lora_apply(const Tensor& W0, const LoraAttachment& att, const Tensor& s,
                         const Tensor& x) {
    if (s.numel() != 1)
        throw std::invalid_argument("lora_apply: scale must be a scalar, got " +
                                    shape_str(s.shape()));
    Tensor base = matmul(W0, x);
    Tensor low = matmul(att.B, matmul(att.A, x));
    return add(base, mul(low, s));
}

inline Tensor lora_apply(const Tensor& W0, const LoraAttachment& att, double s, const Tensor& x) {
    return lora_apply(W0, att, Tensor::scalar(s), x);
}

// Folds the update into the base weight. Only well-defined for a constant
// scale: the gated scale is input-dependent and cannot be merged.
inline Tensor lora_merge(const Tensor& W0, const LoraAttachment& att, double s_const) {
    Tensor delta = lora_delta(att, s_const);
    if (W0.shape() != delta.shape())
        throw std::invalid_argument("lora_merge: base " + shape_str(W0.shape()) +
                                    " vs update " + shape_str(delta.shape()));
    std::vector<double> merged = W0.data();
    for (size_t i = 0; i < merged.size(); ++i) merged[i] += delta.data()[i];
    return Tensor::from(W0.shape(), std::move(merged));
}

// Residual bottleneck after the feedforward block: Z_FN + G_A * up(gelu(down(Z_FN))).
// W_up and b_up start at zero so a fresh attachment is an exact no-op.
struct AdapterAttachment {
    Tensor W_down;  // [D_mid x D]
    Tensor b_down;  // [D_mid]
    Tensor W_up;    // [D x D_mid]
    Tensor b_up;    // [D]
    int d_mid = 0;
};

inline AdapterAttachment make_adapter(int d_hidden, int d_mid, std::mt19937_64& rng) {
    if (d_mid < 1 || d_mid > d_hidden)
        throw std::invalid_argument("adapter bottleneck " + std::to_string(d_mid) +
                                    " must be in [1, " + std::to_string(d_hidden) + "]");
    AdapterAttachment att;
    att.W_down = Tensor::randn({d_mid, d_hidden}, rng, 1.0 / std::sqrt(double(d_hidden)));
    att.b_down = Tensor::zeros({d_mid});
    att.W_up = Tensor::zeros({d_hidden, d_mid});
    att.b_up = Tensor::zeros({d_hidden});
    att.d_mid = d_mid;
    return att;
}

inline Tensor adapter_forward(const AdapterAttachment& att, const Tensor& z_fn,
                              const Tensor& g_a) {
    if (g_a.numel() != 1)
        throw std::invalid_argument("adapter_forward: gate must be a scalar, got " +
                                    shape_str(g_a.shape()));
    Tensor down = add_rowvec(matmul(z_fn, transpose(att.W_down)), att.b_down);
    Tensor up = add_rowvec(matmul(gelu(down), transpose(att.W_up)), att.b_up);
    return add(z_fn, mul(up, g_a));
}

inline Tensor adapter_forward(const AdapterAttachment& att, const Tensor& z_fn, double g_a) {
    if (g_a < 0.0 || g_a > 1.0)
        throw std::invalid_argument("adapter_forward: gate value " + std::to_string(g_a) +
                                    " outside [0, 1]");
    return adapter_forward(att, z_fn, Tensor::scalar(g_a));
}

// Per-layer prefix source embeddings plus one shared reparameterization
// network (D_src -> D_rp, gelu, D_rp -> 2*D_hidden). The 2*D_hidden output is
// split by columns: the first D_hidden become P_K rows, the last D_hidden
// become P_V rows.
struct PrefixBank {
    std::vector<Tensor> sources;  // indexed by layer; undefined handle = layer has no prefix
    Tensor W1, b1;                // [D_rp x D_src], [D_rp]
    Tensor W2, b2;                // [2*D_hidden x D_rp], [2*D_hidden]
    int prefix_len = 0;
    int d_hidden = 0;

    bool has_layer(int layer) const {
        return layer >= 0 && layer < static_cast<int>(sources.size()) &&
               sources[static_cast<size_t>(layer)].defined();
    }
};

inline PrefixBank make_prefix_bank(int n_layers, const std::vector<int>& prefix_layers,
                                   int prefix_len, int d_hidden, std::mt19937_64& rng) {
    if (prefix_len < 1)
        throw std::invalid_argument("prefix length must be >= 1, got " +
                                    std::to_string(prefix_len));
    PrefixBank bank;
    bank.prefix_len = prefix_len;
    bank.d_hidden = d_hidden;
    int d_src = d_hidden;
    int d_rp = 2 * d_hidden;
    bank.sources.resize(static_cast<size_t>(n_layers));
    for (int layer : prefix_layers) {
        if (layer < 0 || layer >= n_layers)
            throw std::invalid_argument("prefix layer " + std::to_string(layer) +
                                        " out of range [0, " + std::to_string(n_layers) + ")");
        bank.sources[static_cast<size_t>(layer)] =
            Tensor::randn({prefix_len, d_src}, rng, 1.0 / std::sqrt(double(d_src)));
    }
    bank.W1 = Tensor::randn({d_rp, d_src}, rng, 1.0 / std::sqrt(double(d_src)));
    bank.b1 = Tensor::zeros({d_rp});
    bank.W2 = Tensor::randn({2 * d_hidden, d_rp}, rng, 1.0 / std::sqrt(double(d_rp)));
    bank.b2 = Tensor::zeros({2 * d_hidden});
    return bank;
}

struct PrefixKV {
    Tensor P_K;  // [D_hidden x L]
    Tensor P_V;  // [D_hidden x L]
};

inline PrefixKV prefix_materialize(const PrefixBank& bank, int layer) {
    if (layer < 0 || layer >= static_cast<int>(bank.sources.size()))
        throw std::invalid_argument("prefix_materialize: layer " + std::to_string(layer) +
                                    " out of range [0, " +
                                    std::to_string(bank.sources.size()) + ")");
    if (!bank.has_layer(layer))
        throw std::invalid_argument("prefix_materialize: layer " + std::to_string(layer) +
                                    " has no prefix source");
    const Tensor& e = bank.sources[static_cast<size_t>(layer)];  // [L x D_src]
    Tensor h = gelu(add_rowvec(matmul(e, transpose(bank.W1)), bank.b1));
    Tensor o = add_rowvec(matmul(h, transpose(bank.W2)), bank.b2);  // [L x 2D]
    PrefixKV kv;
    kv.P_K = transpose(slice_cols(o, 0, bank.d_hidden));
    kv.P_V = transpose(slice_cols(o, bank.d_hidden, bank.d_hidden));
    return kv;
}

// ---- parameter accounting ------------------------------------------------------

struct ParamComponent {
    std::string name;
    size_t trainable = 0;
    size_t frozen = 0;
    size_t total() const { return trainable + frozen; }
};

struct ParamReport {
    std::vector<ParamComponent> components;
    size_t trainable = 0;
    size_t frozen = 0;
    size_t total = 0;
    double ratio = 0.0;  // trainable / total over the whole model
    // Attachment parameters (including gates, which live on encoder layers)
    // relative to the encoder they adapt; decoder and prompt tokens excluded
    // from both sides.
    size_t encoder_base = 0;
    size_t encoder_attachments = 0;
    double encoder_side_ratio = 0.0;
};

// Closed-form counts, cross-checked against flag enumeration in tests.
inline size_t lora_param_count(int r, int d, int k) {
    return static_cast<size_t>(r) * (static_cast<size_t>(d) + static_cast<size_t>(k));
}

inline size_t prefix_param_count(int n_prefix_layers, int prefix_len, int d_hidden) {
    size_t d_src = static_cast<size_t>(d_hidden);
    size_t d_rp = 2 * d_src;
    size_t two_d = 2 * static_cast<size_t>(d_hidden);
    size_t sources = static_cast<size_t>(n_prefix_layers) * static_cast<size_t>(prefix_len) * d_src;
    size_t reparam = (d_rp * d_src + d_rp) + (two_d * d_rp + two_d);
    return sources + reparam;
}

inline size_t adapter_param_count(int n_layers, int d_hidden, int d_mid) {
    size_t per_layer = 2 * static_cast<size_t>(d_hidden) * static_cast<size_t>(d_mid) +
                       static_cast<size_t>(d_mid) + static_cast<size_t>(d_hidden);
    return static_cast<size_t>(n_layers) * per_layer;
}

inline size_t gate_param_count(int d_hidden, int d_gate) {
    return static_cast<size_t>(d_gate) * static_cast<size_t>(d_hidden) +
           static_cast<size_t>(d_gate) +  // fc1
           static_cast<size_t>(d_gate) + 1;  // fc2
}

}  // namespace mopeft
