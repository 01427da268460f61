#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mopeft/common.hpp"
#include "mopeft/config.hpp"
#include "mopeft/gating.hpp"
#include "mopeft/layers.hpp"
#include "mopeft/peft.hpp"
#include "mopeft/rng.hpp"

namespace mopeft {

struct SegModel {
    ExperimentConfig cfg;
    Linear patch_proj;  // [D x P*P]
    Tensor pos_embed;   // [n_tok x D]
    std::vector<TransformerBlock> blocks;
    Tensor prompt_tokens;  // [n_prompt x D], never trainable
    Linear decoder;        // [classes x D]
    std::optional<PrefixBank> prefix;
    std::vector<GateNet> gates;  // MoPEFT: layer-major x (lora, prefix, adapter); or 3 shared

    int grid() const { return cfg.image / cfg.patch; }
    int n_tokens() const { return grid() * grid(); }
    bool gated() const { return !gates.empty(); }
    const GateNet& gate_for(int layer, PeftMethod m) const {
        size_t idx = cfg.gate_per_layer
                         ? static_cast<size_t>(layer) * 3 + static_cast<size_t>(m)
                         : static_cast<size_t>(m);
        return gates[idx];
    }
};

namespace detail {

inline bool mode_has_lora(FineTuneMode m) {
    return m == FineTuneMode::kLoRA || m == FineTuneMode::kMoPEFT;
}
inline bool mode_has_adapter(FineTuneMode m) {
    return m == FineTuneMode::kAdapter || m == FineTuneMode::kMoPEFT;
}
inline std::vector<int> mode_prefix_layers(FineTuneMode m, int n_layers) {
    if (m == FineTuneMode::kVPTShallow) return {0};
    if (m == FineTuneMode::kVPTDeep || m == FineTuneMode::kMoPEFT) {
        std::vector<int> all(static_cast<size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i) all[static_cast<size_t>(i)] = i;
        return all;
    }
    return {};
}

}  // namespace detail

// Visits every parameter tensor with its stable name; the same order defines
// the checkpoint record layout.
inline void visit_params(SegModel& model, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("patch_proj.weight", model.patch_proj.weight);
    fn("patch_proj.bias", model.patch_proj.bias);
    fn("pos_embed", model.pos_embed);
    for (size_t i = 0; i < model.blocks.size(); ++i) {
        TransformerBlock& b = model.blocks[i];
        std::string p = "block" + std::to_string(i) + ".";
        fn(p + "ln1.gain", b.ln1_gain);
        fn(p + "ln1.bias", b.ln1_bias);
        fn(p + "attn.wq.weight", b.attn.wq.weight);
        fn(p + "attn.wq.bias", b.attn.wq.bias);
        fn(p + "attn.wk.weight", b.attn.wk.weight);
        fn(p + "attn.wk.bias", b.attn.wk.bias);
        fn(p + "attn.wv.weight", b.attn.wv.weight);
        fn(p + "attn.wv.bias", b.attn.wv.bias);
        fn(p + "attn.wo.weight", b.attn.wo.weight);
        fn(p + "attn.wo.bias", b.attn.wo.bias);
        fn(p + "ln2.gain", b.ln2_gain);
        fn(p + "ln2.bias", b.ln2_bias);
        fn(p + "ffn1.weight", b.ffn1.weight);
        fn(p + "ffn1.bias", b.ffn1.bias);
        fn(p + "ffn2.weight", b.ffn2.weight);
        fn(p + "ffn2.bias", b.ffn2.bias);
        if (b.attn.lora_q) {
            fn(p + "lora_q.A", b.attn.lora_q->A);
            fn(p + "lora_q.B", b.attn.lora_q->B);
        }
        if (b.attn.lora_v) {
            fn(p + "lora_v.A", b.attn.lora_v->A);
            fn(p + "lora_v.B", b.attn.lora_v->B);
        }
        if (b.adapter) {
            fn(p + "adapter.w_down", b.adapter->W_down);
            fn(p + "adapter.b_down", b.adapter->b_down);
            fn(p + "adapter.w_up", b.adapter->W_up);
            fn(p + "adapter.b_up", b.adapter->b_up);
        }
    }
    if (model.prefix) {
        PrefixBank& bank = *model.prefix;
        for (size_t i = 0; i < bank.sources.size(); ++i)
            if (bank.sources[i].defined())
                fn("prefix.src" + std::to_string(i), bank.sources[i]);
        fn("prefix.w1", bank.W1);
        fn("prefix.b1", bank.b1);
        fn("prefix.w2", bank.W2);
        fn("prefix.b2", bank.b2);
    }
    for (size_t g = 0; g < model.gates.size(); ++g) {
        GateNet& gate = model.gates[g];
        std::string p = "gate." +
                        (gate.layer >= 0 ? std::to_string(gate.layer) : std::string("shared")) +
                        "." + method_name(gate.method) + ".";
        fn(p + "fc1_w", gate.fc1_w);
        fn(p + "fc1_b", gate.fc1_b);
        fn(p + "fc2_w", gate.fc2_w);
        fn(p + "fc2_b", gate.fc2_b);
    }
    fn("prompt_tokens", model.prompt_tokens);
    fn("decoder.weight", model.decoder.weight);
    fn("decoder.bias", model.decoder.bias);
}

inline NamedParams named_params(SegModel& model) {
    NamedParams out;
    visit_params(model, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

inline NamedParams trainable_params(SegModel& model) {
    NamedParams out;
    visit_params(model, [&](const std::string& name, Tensor& t) {
        if (t.requires_grad()) out.emplace_back(name, t);
    });
    return out;
}

// Per-parameter trainable flags implementing the freezing policy: the base
// encoder and prompt tokens are always frozen; the decoder trains in every
// mode but Baseline; attachments and gates train in their own modes.
inline void apply_freezing_policy(SegModel& model) {
    FineTuneMode mode = model.cfg.mode;
    visit_params(model, [&](const std::string& name, Tensor& t) {
        bool trainable = false;
        if (name.rfind("decoder.", 0) == 0) trainable = mode != FineTuneMode::kBaseline;
        else if (name.find(".lora_") != std::string::npos) trainable = true;
        else if (name.find(".adapter.") != std::string::npos) trainable = true;
        else if (name.rfind("prefix.", 0) == 0) trainable = true;
        else if (name.rfind("gate.", 0) == 0) trainable = true;
        t.set_requires_grad(trainable);
    });
}

// Builds the model for a mode. Every base component draws from its own
// seed-derived stream tagged by component name, so base weights are identical
// across modes under the same seed.
inline SegModel build_model(const ExperimentConfig& cfg) {
    validate_config(cfg);
    SegModel model;
    model.cfg = cfg;
    int d = cfg.dim;
    int n_tok = (cfg.image / cfg.patch) * (cfg.image / cfg.patch);

    {
        auto rng = substream(cfg.seed, "init/patch_proj", 0);
        model.patch_proj = make_linear(d, cfg.patch * cfg.patch, rng);
    }
    {
        auto rng = substream(cfg.seed, "init/pos_embed", 0);
        model.pos_embed = Tensor::randn({n_tok, d}, rng, 1.0 / std::sqrt(double(d)));
    }
    model.blocks.reserve(static_cast<size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i) {
        auto rng = substream(cfg.seed, "init/block", static_cast<uint64_t>(i));
        model.blocks.push_back(make_block(d, cfg.heads, rng));
    }
    {
        auto rng = substream(cfg.seed, "init/prompt", 0);
        model.prompt_tokens = Tensor::randn({cfg.prompt_tokens, d}, rng, 1.0 / std::sqrt(double(d)));
    }
    {
        auto rng = substream(cfg.seed, "init/decoder", 0);
        model.decoder = make_linear(cfg.classes, d, rng);
    }

    if (detail::mode_has_lora(cfg.mode)) {
        for (int i = 0; i < cfg.layers; ++i) {
            std::string tag = "block" + std::to_string(i);
            if (cfg.lora_targets.find('q') != std::string::npos) {
                auto rng = substream(cfg.seed, "init/lora_q", static_cast<uint64_t>(i));
                model.blocks[static_cast<size_t>(i)].attn.lora_q =
                    make_lora(d, d, cfg.rank, cfg.alpha_base, tag + ".wq", rng);
            }
            if (cfg.lora_targets.find('v') != std::string::npos) {
                auto rng = substream(cfg.seed, "init/lora_v", static_cast<uint64_t>(i));
                model.blocks[static_cast<size_t>(i)].attn.lora_v =
                    make_lora(d, d, cfg.rank, cfg.alpha_base, tag + ".wv", rng);
            }
        }
    }
    std::vector<int> prefix_layers = detail::mode_prefix_layers(cfg.mode, cfg.layers);
    if (!prefix_layers.empty()) {
        auto rng = substream(cfg.seed, "init/prefix", 0);
        model.prefix = make_prefix_bank(cfg.layers, prefix_layers, cfg.prefix_len, d, rng);
    }
    if (detail::mode_has_adapter(cfg.mode)) {
        for (int i = 0; i < cfg.layers; ++i) {
            auto rng = substream(cfg.seed, "init/adapter", static_cast<uint64_t>(i));
            model.blocks[static_cast<size_t>(i)].adapter = make_adapter(d, cfg.d_mid, rng);
        }
    }
    if (cfg.mode == FineTuneMode::kMoPEFT) {
        const PeftMethod methods[] = {PeftMethod::kLora, PeftMethod::kPrefix,
                                      PeftMethod::kAdapter};
        if (cfg.gate_per_layer) {
            for (int i = 0; i < cfg.layers; ++i)
                for (PeftMethod m : methods) {
                    auto rng = substream(cfg.seed, std::string("init/gate/") + method_name(m),
                                         static_cast<uint64_t>(i));
                    model.gates.push_back(make_gate(d, cfg.gate_hidden, i, m, rng));
                }
        } else {
            for (PeftMethod m : methods) {
                auto rng =
                    substream(cfg.seed, std::string("init/gate/") + method_name(m), 0);
                model.gates.push_back(make_gate(d, cfg.gate_hidden, -1, m, rng));
            }
        }
    }

    apply_freezing_policy(model);
    return model;
}

// Test/diagnostic switch: pins a method's gate to a constant instead of the
// learned (or mode-default) value. Values forced to exactly 0 or 1 are not
// recorded in telemetry; interior values are.
struct ForceGates {
    std::optional<double> lora;
    std::optional<double> prefix;
    std::optional<double> adapter;
};

struct ForwardOptions {
    GateTelemetry* telemetry = nullptr;
    int sample_id = 0;
    ForceGates force;
    std::vector<AttnProbe>* probes = nullptr;  // filled per layer when set
};

// Image [H x W] -> per-pixel logits [H x W x classes]. The constant prompt
// tokens are appended ahead of the decoder head; the head is per-token, so
// only the patch-token rows map to pixels.
inline Tensor model_forward(SegModel& model, const Tensor& image, const ForwardOptions& opts = {}) {
    const ExperimentConfig& cfg = model.cfg;
    if (image.rank() < 2 || image.extent(0) != cfg.image || image.extent(1) != cfg.image)
        throw std::invalid_argument("model_forward: image " + shape_str(image.shape()) +
                                    " does not match configured " + std::to_string(cfg.image) +
                                    "x" + std::to_string(cfg.image));
    Tensor tokens = patch_embed(image, cfg.patch, model.patch_proj, model.pos_embed);
    if (opts.probes) opts.probes->assign(static_cast<size_t>(cfg.layers), {});

    for (int i = 0; i < cfg.layers; ++i) {
        TransformerBlock& block = model.blocks[static_cast<size_t>(i)];
        Tensor h_in = tokens;

        auto gate_value = [&](PeftMethod m, const std::optional<double>& forced,
                              double ungated_default) -> Tensor {
            if (forced) {
                if (*forced < 0.0 || *forced > 1.0)
                    throw std::invalid_argument("forced gate value " + std::to_string(*forced) +
                                                " outside [0, 1]");
                if (opts.telemetry && *forced > 0.0 && *forced < 1.0)
                    record_activation(*opts.telemetry, opts.sample_id, i, m, *forced);
                return Tensor::scalar(*forced);
            }
            if (!model.gated()) return Tensor::scalar(ungated_default);
            Tensor g = gate_forward(model.gate_for(i, m), h_in);
            if (opts.telemetry) record_activation(*opts.telemetry, opts.sample_id, i, m, g.item());
            return g;
        };

        AttnInject inject;
        if (block.attn.lora_q || block.attn.lora_v) {
            // single-method LoRA uses the conventional constant alpha/r scale;
            // MoPEFT modulates it by the gate
            Tensor g = gate_value(PeftMethod::kLora, opts.force.lora, 1.0);
            Tensor s = scale(g, cfg.alpha_base / cfg.rank);
            if (block.attn.lora_q) inject.lora_scale_q = s;
            if (block.attn.lora_v) inject.lora_scale_v = s;
        }
        PrefixKV kv;
        if (model.prefix && model.prefix->has_layer(i)) {
            kv = prefix_materialize(*model.prefix, i);
            inject.prefix = &kv;
            inject.gate_prefix = gate_value(PeftMethod::kPrefix, opts.force.prefix, 1.0);
        }
        Tensor adapter_gate;
        if (block.adapter)
            adapter_gate = gate_value(PeftMethod::kAdapter, opts.force.adapter, 1.0);

        AttnProbe* probe = opts.probes ? &(*opts.probes)[static_cast<size_t>(i)] : nullptr;
        tokens = block_forward(block, h_in, inject, adapter_gate, probe);
    }

    Tensor with_prompt = concat_rows(tokens, model.prompt_tokens);
    Tensor logits_all = linear_forward(model.decoder, with_prompt);
    Tensor tok_logits = slice_rows(logits_all, 0, model.n_tokens());
    return upsample_nearest(tok_logits, model.grid(), model.grid(), cfg.patch);
}

// ---- parameter accounting ----------------------------------------------------

inline ParamReport count_trainable(SegModel& model) {
    std::map<std::string, ParamComponent> comps;
    auto classify = [](const std::string& name) -> std::string {
        if (name.find(".lora_") != std::string::npos) return "lora";
        if (name.find(".adapter.") != std::string::npos) return "adapter";
        if (name.rfind("prefix.", 0) == 0) return "prefix";
        if (name.rfind("gate.", 0) == 0) return "gates";
        if (name.rfind("decoder.", 0) == 0) return "decoder";
        if (name == "prompt_tokens") return "prompt";
        return "encoder";
    };
    for (const char* name : {"encoder", "decoder", "prompt", "lora", "prefix", "adapter", "gates"})
        comps[name].name = name;
    visit_params(model, [&](const std::string& name, Tensor& t) {
        ParamComponent& c = comps[classify(name)];
        if (t.requires_grad()) c.trainable += t.numel();
        else c.frozen += t.numel();
    });
    ParamReport report;
    for (const char* name : {"encoder", "decoder", "prompt", "lora", "prefix", "adapter", "gates"})
        report.components.push_back(comps[name]);
    for (const ParamComponent& c : report.components) {
        report.trainable += c.trainable;
        report.frozen += c.frozen;
    }
    report.total = report.trainable + report.frozen;
    report.ratio = report.total ? double(report.trainable) / double(report.total) : 0.0;
    report.encoder_base = comps["encoder"].total();
    report.encoder_attachments = comps["lora"].total() + comps["prefix"].total() +
                                 comps["adapter"].total() + comps["gates"].total();
    size_t enc_side = report.encoder_base + report.encoder_attachments;
    report.encoder_side_ratio =
        enc_side ? double(report.encoder_attachments) / double(enc_side) : 0.0;
    return report;
}

inline std::string format_param_report(const ParamReport& r) {
    std::string out = "component        trainable      frozen       total\n";
    char buf[128];
    for (const ParamComponent& c : r.components) {
        std::snprintf(buf, sizeof(buf), "%-12s %12zu %11zu %11zu\n", c.name.c_str(), c.trainable,
                      c.frozen, c.total());
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-12s %12zu %11zu %11zu\n", "overall", r.trainable, r.frozen,
                  r.total);
    out += buf;
    std::snprintf(buf, sizeof(buf), "trainable/total ratio: %.6g\n", r.ratio);
    out += buf;
    std::snprintf(buf, sizeof(buf), "encoder-side attachment ratio: %.6g\n",
                  r.encoder_side_ratio);
    out += buf;
    return out;
}

// ---- checkpointing -------------------------------------------------------------
// Little-endian binary: magic "MPFT", u32 format version, u32 mode tag, u64
// canonical-config length + bytes, u32 record count, then per parameter:
// u32 name length, name bytes, u32 rank, u32 extents, f64 data.

constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(SegModel& model) {
    std::string out = "MPFT";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<uint32_t>(model.cfg.mode));
    std::string cfg_text = canonical_config(model.cfg);
    put_u64(out, cfg_text.size());
    out += cfg_text;
    NamedParams params = named_params(model);
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (auto& [name, t] : params) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(t.rank()));
        for (int e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
        for (double v : t.data()) put_f64(out, v);
    }
    return out;
}

inline void save_checkpoint(SegModel& model, const std::filesystem::path& path) {
    atomic_write_file(path, serialize_checkpoint(model));
}

inline SegModel deserialize_checkpoint(const std::string& bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.str(4) != "MPFT") throw FormatError(what + ": bad magic (not a checkpoint)");
    uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError(what + ": unsupported format version " + std::to_string(version));
    uint32_t mode_tag = r.u32();
    if (mode_tag > 6) throw FormatError(what + ": invalid mode tag " + std::to_string(mode_tag));
    uint64_t cfg_len = r.u64();
    ExperimentConfig cfg = parse_config_text(r.str(cfg_len));
    if (static_cast<uint32_t>(cfg.mode) != mode_tag)
        throw FormatError(what + ": mode tag " + mode_name(static_cast<FineTuneMode>(mode_tag)) +
                          " disagrees with embedded config mode " + mode_name(cfg.mode));

    SegModel model = build_model(cfg);
    NamedParams params = named_params(model);
    uint32_t count = r.u32();
    if (count != params.size())
        throw FormatError(what + ": " + std::to_string(count) + " parameter records, expected " +
                          std::to_string(params.size()));
    for (auto& [name, t] : params) {
        std::string rec_name = r.str(r.u32());
        if (rec_name != name)
            throw FormatError(what + ": parameter record '" + rec_name + "', expected '" + name +
                              "'");
        uint32_t rank = r.u32();
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(r.u32());
        if (shape != t.shape())
            throw FormatError(what + ": parameter '" + name + "' has extents " + shape_str(shape) +
                              ", expected " + shape_str(t.shape()));
        for (double& v : t.data()) v = r.f64();
    }
    if (!r.at_end())
        throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return model;
}

inline SegModel load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path), path.string());
}

inline SegModel load_checkpoint(const std::filesystem::path& path, FineTuneMode expected) {
    SegModel model = load_checkpoint(path);
    if (model.cfg.mode != expected)
        throw FormatError(path.string() + ": checkpoint mode " + mode_name(model.cfg.mode) +
                          " does not match requested mode " + mode_name(expected));
    return model;
}

}  // namespace mopeft
