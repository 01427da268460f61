#pragma once

#include <optional>
#include <random>
#include <vector>

#include "mopeft/peft.hpp"
#include "mopeft/tensor.hpp"

namespace mopeft {

struct Linear {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]
};

inline Linear make_linear(int out, int in, std::mt19937_64& rng) {
    Linear lin;
    lin.weight = Tensor::randn({out, in}, rng, 1.0 / std::sqrt(double(in)));
    lin.bias = Tensor::zeros({out});
    return lin;
}

// x: [N x in] -> [N x out]
inline Tensor linear_forward(const Linear& lin, const Tensor& x) {
    return add_rowvec(matmul(x, transpose(lin.weight)), lin.bias);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::check_rank2(x, "layer_norm");
    int d = x.extent(1);
    if (d < 2)
        throw std::invalid_argument("layer_norm: feature extent must be >= 2, got " +
                                    shape_str(x.shape()));
    if (static_cast<int>(gain.numel()) != d || static_cast<int>(bias.numel()) != d)
        throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(d) +
                                    " elements");
    Tensor mu = scale(row_sum(x), 1.0 / d);
    Tensor xc = sub_col(x, mu);
    Tensor var = scale(row_sum(mul(xc, xc)), 1.0 / d);
    Tensor xhat = div_col(xc, sqrt(add(var, Tensor::scalar(eps))));
    return add_rowvec(mul_rowvec(xhat, gain), bias);
}

struct AttentionBlock {
    Linear wq, wk, wv, wo;
    int heads = 1;
    std::optional<LoraAttachment> lora_q, lora_v;
};

inline AttentionBlock make_attention(int d_hidden, int heads, std::mt19937_64& rng) {
    if (heads < 1 || d_hidden % heads != 0)
        throw std::invalid_argument("attention heads (" + std::to_string(heads) +
                                    ") must divide hidden size (" + std::to_string(d_hidden) +
                                    ")");
    AttentionBlock blk;
    blk.wq = make_linear(d_hidden, d_hidden, rng);
    blk.wk = make_linear(d_hidden, d_hidden, rng);
    blk.wv = make_linear(d_hidden, d_hidden, rng);
    blk.wo = make_linear(d_hidden, d_hidden, rng);
    blk.heads = heads;
    return blk;
}

// Per-call injection state for one attention forward. LoRA scales must be
// provided (as scalar tensors, possibly gate-derived) whenever the block
// carries the corresponding attachment; prefix needs its gate the same way.
struct AttnInject {
    Tensor lora_scale_q;
    Tensor lora_scale_v;
    const PrefixKV* prefix = nullptr;
    Tensor gate_prefix;
};

// Effective post-gate attention weights captured for tests/telemetry: one
// row-major [L0 x (L0 + L)] matrix per head, real positions first.
struct AttnProbe {
    int l0 = 0;
    int l_prefix = 0;
    std::vector<std::vector<double>> head_weights;
};

namespace detail {

inline Tensor project(const Linear& lin, const Tensor& x,
                      const std::optional<LoraAttachment>& lora, const Tensor& lora_scale) {
    Tensor out = linear_forward(lin, x);
    if (lora) {
        if (!lora_scale.defined())
            throw std::invalid_argument("mhsa_forward: LoRA attachment present on " +
                                        lora->target + " but no scale provided");
        Tensor low = matmul(matmul(x, transpose(lora->A)), transpose(lora->B));
        out = add(out, mul(low, lora_scale));
    }
    return out;
}

}  // namespace detail

// Multi-head self-attention with optional LoRA on the query/value projections
// and an optional gated prefix. The prefix enters through a decomposed
// softmax: per query, numerator = sum_real exp(l)*v + G_P * sum_prefix
// exp(l)*p_v and denominator = sum_real exp(l) + G_P * sum_prefix exp(l), so
// G_P = 0 reproduces the prefix-free attention exactly instead of leaving
// exp(0) mass in the denominator. The shared row max is detached; it cancels
// between numerator and denominator, so no gradient is lost.
inline Tensor mhsa_forward(const AttentionBlock& block, const Tensor& h_in,
                           const AttnInject& inject = {}, AttnProbe* probe = nullptr) {
    detail::check_rank2(h_in, "mhsa_forward");
    int l0 = h_in.extent(0);
    int d = h_in.extent(1);
    if (d != block.wq.weight.extent(1))
        throw std::invalid_argument("mhsa_forward: input " + shape_str(h_in.shape()) +
                                    " vs projection " + shape_str(block.wq.weight.shape()));
    int heads = block.heads;
    int dh = d / heads;
    double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    int lp = 0;
    if (inject.prefix) {
        const Shape want{d, inject.prefix->P_K.extent(1)};
        if (inject.prefix->P_K.shape() != want || inject.prefix->P_V.shape() != want)
            throw std::invalid_argument(
                "mhsa_forward: prefix extents " + shape_str(inject.prefix->P_K.shape()) + " / " +
                shape_str(inject.prefix->P_V.shape()) + " do not match [" + std::to_string(d) +
                " x L]");
        if (!inject.gate_prefix.defined() || inject.gate_prefix.numel() != 1)
            throw std::invalid_argument("mhsa_forward: prefix present but gate missing");
        lp = inject.prefix->P_K.extent(1);
    }

    Tensor q = detail::project(block.wq, h_in, block.lora_q, inject.lora_scale_q);
    Tensor k = detail::project(block.wk, h_in, {}, {});
    Tensor v = detail::project(block.wv, h_in, block.lora_v, inject.lora_scale_v);

    if (probe) {
        probe->l0 = l0;
        probe->l_prefix = lp;
        probe->head_weights.assign(static_cast<size_t>(heads), {});
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor logits_real = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);

        Tensor num, den;
        Tensor e_real, e_pref;
        if (inject.prefix) {
            Tensor pkh = slice_rows(inject.prefix->P_K, h * dh, dh);  // [dh x L]
            Tensor pvh = slice_rows(inject.prefix->P_V, h * dh, dh);
            Tensor logits_pref = scale(matmul(qh, pkh), inv_sqrt_dh);  // [l0 x L]
            Tensor m = detached_row_max({logits_real, logits_pref});
            e_real = exp(sub_col(logits_real, m));
            e_pref = exp(sub_col(logits_pref, m));
            num = add(matmul(e_real, vh),
                      mul(matmul(e_pref, transpose(pvh)), inject.gate_prefix));
            den = add(row_sum(e_real), mul(row_sum(e_pref), inject.gate_prefix));
        } else {
            Tensor m = detached_row_max({logits_real});
            e_real = exp(sub_col(logits_real, m));
            num = matmul(e_real, vh);
            den = row_sum(e_real);
        }
        head_outs.push_back(div_col(num, den));

        if (probe) {
            auto& w = probe->head_weights[static_cast<size_t>(h)];
            w.resize(static_cast<size_t>(l0) * (l0 + lp));
            double g = inject.prefix ? inject.gate_prefix.item() : 0.0;
            for (int i = 0; i < l0; ++i) {
                double di = den.data()[static_cast<size_t>(i)];
                for (int j = 0; j < l0; ++j)
                    w[static_cast<size_t>(i) * (l0 + lp) + j] =
                        e_real.data()[static_cast<size_t>(i) * l0 + j] / di;
                for (int p = 0; p < lp; ++p)
                    w[static_cast<size_t>(i) * (l0 + lp) + l0 + p] =
                        g * e_pref.data()[static_cast<size_t>(i) * lp + p] / di;
            }
        }
    }
    return linear_forward(block.wo, concat_cols(head_outs));
}

struct TransformerBlock {
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    AttentionBlock attn;
    Linear ffn1, ffn2;  // expansion x4, gelu between
    std::optional<AdapterAttachment> adapter;
};

inline TransformerBlock make_block(int d_hidden, int heads, std::mt19937_64& rng) {
    TransformerBlock blk;
    blk.ln1_gain = Tensor::full({d_hidden}, 1.0);
    blk.ln1_bias = Tensor::zeros({d_hidden});
    blk.ln2_gain = Tensor::full({d_hidden}, 1.0);
    blk.ln2_bias = Tensor::zeros({d_hidden});
    blk.attn = make_attention(d_hidden, heads, rng);
    blk.ffn1 = make_linear(4 * d_hidden, d_hidden, rng);
    blk.ffn2 = make_linear(d_hidden, 4 * d_hidden, rng);
    return blk;
}

// Pre-norm feedforward half of the block: Z_FN = x + FFN(LN2(x)). With the
// second FFN layer zeroed this is exactly the residual input.
inline Tensor ffn_forward(const TransformerBlock& block, const Tensor& x) {
    Tensor normed = layer_norm(x, block.ln2_gain, block.ln2_bias);
    Tensor ffn = linear_forward(block.ffn2, gelu(linear_forward(block.ffn1, normed)));
    return add(x, ffn);
}

// Full pre-norm block: attention half, FFN half, then the (gated) adapter on
// Z_FN when attached. adapter_gate must be a defined scalar iff an adapter is
// present.
inline Tensor block_forward(const TransformerBlock& block, const Tensor& h_in,
                            const AttnInject& inject = {}, Tensor adapter_gate = {},
                            AttnProbe* probe = nullptr) {
    Tensor normed = layer_norm(h_in, block.ln1_gain, block.ln1_bias);
    Tensor h_mid = add(h_in, mhsa_forward(block.attn, normed, inject, probe));
    Tensor z_fn = ffn_forward(block, h_mid);
    if (block.adapter) {
        if (!adapter_gate.defined())
            throw std::invalid_argument("block_forward: adapter present but gate missing");
        return adapter_forward(*block.adapter, z_fn, adapter_gate);
    }
    return z_fn;
}

// Non-overlapping P x P patches of a [H x W] image, row-major within each
// patch, one token per patch.
inline Tensor extract_patches(const Tensor& image, int patch) {
    if (image.rank() != 2 && !(image.rank() == 3 && image.extent(2) == 1))
        throw std::invalid_argument("extract_patches: expected [H x W] grayscale image, got " +
                                    shape_str(image.shape()));
    int hpix = image.extent(0), wpix = image.extent(1);
    if (patch < 1 || hpix % patch != 0 || wpix % patch != 0)
        throw std::invalid_argument("extract_patches: patch " + std::to_string(patch) +
                                    " does not divide image " + shape_str(image.shape()));
    int gh = hpix / patch, gw = wpix / patch;
    int n_tok = gh * gw, plen = patch * patch;
    std::vector<double> out(static_cast<size_t>(n_tok) * plen);
    const auto& src = image.data();
    for (int t = 0; t < n_tok; ++t) {
        int pr = t / gw, pc = t % gw;
        for (int i = 0; i < patch; ++i)
            for (int j = 0; j < patch; ++j)
                out[static_cast<size_t>(t) * plen + i * patch + j] =
                    src[static_cast<size_t>(pr * patch + i) * wpix + pc * patch + j];
    }
    return make_op("extract_patches", {n_tok, plen}, std::move(out), {image},
                   [wpix, gw, patch, n_tok, plen](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (int t = 0; t < n_tok; ++t) {
                           int pr = t / gw, pc = t % gw;
                           for (int i = 0; i < patch; ++i)
                               for (int j = 0; j < patch; ++j)
                                   in.grad[static_cast<size_t>(pr * patch + i) * wpix +
                                           pc * patch + j] +=
                                       self.grad[static_cast<size_t>(t) * plen + i * patch + j];
                       }
                   });
}

inline Tensor patch_embed(const Tensor& image, int patch, const Linear& proj,
                          const Tensor& pos_embed) {
    Tensor tokens = linear_forward(proj, extract_patches(image, patch));
    if (tokens.shape() != pos_embed.shape())
        throw std::invalid_argument("patch_embed: tokens " + shape_str(tokens.shape()) +
                                    " vs positional embedding " +
                                    shape_str(pos_embed.shape()));
    return add(tokens, pos_embed);
}

// Per-token logits [gh*gw x C] -> per-pixel logits [H x W x C] by copying
// each token's logits over its patch.
inline Tensor upsample_nearest(const Tensor& tok_logits, int gh, int gw, int patch) {
    detail::check_rank2(tok_logits, "upsample_nearest");
    if (tok_logits.extent(0) != gh * gw)
        throw std::invalid_argument("upsample_nearest: " + std::to_string(gh * gw) +
                                    " tokens expected, got " + shape_str(tok_logits.shape()));
    int c = tok_logits.extent(1);
    int hpix = gh * patch, wpix = gw * patch;
    std::vector<double> out(static_cast<size_t>(hpix) * wpix * c);
    const auto& src = tok_logits.data();
    for (int i = 0; i < hpix; ++i)
        for (int j = 0; j < wpix; ++j) {
            int t = (i / patch) * gw + (j / patch);
            for (int cc = 0; cc < c; ++cc)
                out[(static_cast<size_t>(i) * wpix + j) * c + cc] =
                    src[static_cast<size_t>(t) * c + cc];
        }
    return make_op("upsample_nearest", {hpix, wpix, c}, std::move(out), {tok_logits},
                   [gh, gw, patch, c, hpix, wpix](TensorImpl& self) {
                       (void)gh;
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (int i = 0; i < hpix; ++i)
                           for (int j = 0; j < wpix; ++j) {
                               int t = (i / patch) * gw + (j / patch);
                               for (int cc = 0; cc < c; ++cc)
                                   in.grad[static_cast<size_t>(t) * c + cc] +=
                                       self.grad[(static_cast<size_t>(i) * wpix + j) * c + cc];
                           }
                   });
}

}  // namespace mopeft
