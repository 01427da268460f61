#pragma once

#include <array>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "mopeft/tensor.hpp"

namespace mopeft {

enum class PeftMethod { kLora = 0, kPrefix = 1, kAdapter = 2 };

inline const char* method_name(PeftMethod m) {
    switch (m) {
        case PeftMethod::kLora: return "lora";
        case PeftMethod::kPrefix: return "prefix";
        case PeftMethod::kAdapter: return "adapter";
    }
    return "?";
}

inline PeftMethod method_from_name(const std::string& s) {
    if (s == "lora") return PeftMethod::kLora;
    if (s == "prefix") return PeftMethod::kPrefix;
    if (s == "adapter") return PeftMethod::kAdapter;
    throw std::invalid_argument("unknown PEFT method tag '" + s + "'");
}

// Small feedforward gate: mean-pool the layer input over tokens, two linear
// layers with a gelu between, sigmoid output — strictly inside (0,1).
struct GateNet {
    Tensor fc1_w;  // [Dg x D]
    Tensor fc1_b;  // [Dg]
    Tensor fc2_w;  // [1 x Dg]
    Tensor fc2_b;  // [1]
    int layer = -1;  // -1 when shared across layers
    PeftMethod method = PeftMethod::kLora;
};

inline GateNet make_gate(int d_hidden, int d_gate, int layer, PeftMethod method,
                         std::mt19937_64& rng) {
    if (d_gate < 1)
        throw std::invalid_argument("gate hidden size must be >= 1, got " +
                                    std::to_string(d_gate));
    GateNet g;
    g.fc1_w = Tensor::randn({d_gate, d_hidden}, rng, 1.0 / std::sqrt(double(d_hidden)));
    g.fc1_b = Tensor::zeros({d_gate});
    g.fc2_w = Tensor::randn({1, d_gate}, rng, 1.0 / std::sqrt(double(d_gate)));
    g.fc2_b = Tensor::zeros({1});
    g.layer = layer;
    g.method = method;
    return g;
}

inline Tensor gate_forward(const GateNet& gate, const Tensor& h_in) {
    if (h_in.rank() != 2 || h_in.extent(1) != gate.fc1_w.extent(1))
        throw std::invalid_argument("gate_forward: input " + shape_str(h_in.shape()) +
                                    " vs gate fc1 " + shape_str(gate.fc1_w.shape()));
    Tensor pooled = mean_rows(h_in);
    Tensor hidden = gelu(add_rowvec(matmul(pooled, transpose(gate.fc1_w)), gate.fc1_b));
    Tensor logit = add_rowvec(matmul(hidden, transpose(gate.fc2_w)), gate.fc2_b);
    return sigmoid(reshape(logit, {1}));
}

// Learnable LoRA scaling: the gate output in (0,1) modulates the
// conventional alpha/r factor.
inline Tensor lora_effective_scale(const GateNet& gate, const Tensor& h_in, double alpha_base,
                                   int rank) {
    if (rank < 1) throw std::invalid_argument("lora_effective_scale: rank must be >= 1");
    return scale(gate_forward(gate, h_in), alpha_base / rank);
}

struct GateRecord {
    int sample = 0;
    int layer = 0;
    PeftMethod method = PeftMethod::kLora;
    double g = 0.0;
};

// Append-only per-inference-pass log of gate activations.
struct GateTelemetry {
    std::vector<GateRecord> records;
    std::set<std::tuple<int, int, int>> seen;  // (sample, layer, method)

    void clear() {
        records.clear();
        seen.clear();
    }
};

inline void record_activation(GateTelemetry& tel, int sample, int layer, PeftMethod method,
                              double g) {
    if (!(g > 0.0 && g < 1.0))
        throw std::invalid_argument("record_activation: gate value " + std::to_string(g) +
                                    " outside (0,1)");
    auto key = std::make_tuple(sample, layer, static_cast<int>(method));
    if (!tel.seen.insert(key).second)
        throw std::invalid_argument("record_activation: duplicate record for sample " +
                                    std::to_string(sample) + ", layer " + std::to_string(layer) +
                                    ", method " + method_name(method));
    tel.records.push_back({sample, layer, method, g});
}

struct SelectionCounts {
    int n_layers = 0;
    size_t total_samples = 0;
    std::vector<std::array<size_t, 3>> per_layer;  // [layer][method]
    std::array<size_t, 3> overall{0, 0, 0};
};

// A method counts as "called" for a (sample, layer) when its gate value
// exceeds the threshold tau; overall counts sum the layers.
inline SelectionCounts selection_counts(const GateTelemetry& tel, double tau) {
    if (tau < 0.0 || tau > 1.0)
        throw std::invalid_argument("selection_counts: threshold " + std::to_string(tau) +
                                    " outside [0,1]");
    SelectionCounts out;
    std::set<int> samples;
    for (const GateRecord& r : tel.records) {
        out.n_layers = std::max(out.n_layers, r.layer + 1);
        samples.insert(r.sample);
    }
    out.total_samples = samples.size();
    out.per_layer.assign(static_cast<size_t>(out.n_layers), {0, 0, 0});
    for (const GateRecord& r : tel.records) {
        if (r.g > tau) {
            out.per_layer[static_cast<size_t>(r.layer)][static_cast<size_t>(r.method)]++;
            out.overall[static_cast<size_t>(r.method)]++;
        }
    }
    return out;
}

}  // namespace mopeft
