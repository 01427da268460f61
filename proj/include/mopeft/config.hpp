#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mopeft/common.hpp"

namespace mopeft {

// The seven fine-tuning modes. Enum values are stable: they double as the
// checkpoint mode tag.
enum class FineTuneMode : uint32_t {
    kBaseline = 0,
    kDecoderFT = 1,
    kLoRA = 2,
    kVPTDeep = 3,
    kVPTShallow = 4,
    kAdapter = 5,
    kMoPEFT = 6,
};

inline const char* mode_name(FineTuneMode m) {
    switch (m) {
        case FineTuneMode::kBaseline: return "baseline";
        case FineTuneMode::kDecoderFT: return "decoder_ft";
        case FineTuneMode::kLoRA: return "lora";
        case FineTuneMode::kVPTDeep: return "vpt_deep";
        case FineTuneMode::kVPTShallow: return "vpt_shallow";
        case FineTuneMode::kAdapter: return "adapter";
        case FineTuneMode::kMoPEFT: return "mopeft";
    }
    return "?";
}

inline FineTuneMode mode_from_name(const std::string& s) {
    for (uint32_t i = 0; i <= 6; ++i) {
        auto m = static_cast<FineTuneMode>(i);
        if (s == mode_name(m)) return m;
    }
    throw ConfigError("unknown fine-tune mode '" + s +
                      "' (expected baseline, decoder_ft, lora, vpt_deep, vpt_shallow, adapter, "
                      "or mopeft)");
}

struct ExperimentConfig {
    // [model]
    int dim = 64;
    int layers = 4;
    int heads = 4;
    int patch = 4;
    int image = 32;
    int classes = 4;
    int prompt_tokens = 4;
    // [peft]
    FineTuneMode mode = FineTuneMode::kMoPEFT;
    int rank = 8;
    double alpha_base = 16.0;
    int prefix_len = 20;
    int d_mid = 64;
    std::string lora_targets = "qv";
    // [gate]
    double gate_threshold = 0.5;
    bool gate_per_layer = true;
    int gate_hidden = 16;
    // [train]
    double lr = 1e-4;
    double weight_decay = 1e-4;
    int batch = 4;
    int steps = 200;
    int eval_every = 50;
    // [data]
    std::string data_source = "synthetic";
    std::string domain = "stripes";
    double sigma = 0.05;
    int train_n = 32;
    int val_n = 8;
    std::string data_path;
    // top level
    uint64_t seed = 42;
    std::string out_dir = "runs/default";
};

namespace detail {

inline std::string num_str(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
    return std::string(buf, res.ptr);
}

inline long long parse_int(const std::string& key, const std::string& value) {
    long long out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("key '" + key + "': cannot parse '" + value + "' as an integer");
    return out;
}

inline uint64_t parse_u64(const std::string& key, const std::string& value) {
    uint64_t out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("key '" + key + "': cannot parse '" + value +
                          "' as a non-negative integer");
    return out;
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse '" + value + "' as a number");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + value + "'");
}

inline int int_in(const std::string& key, const std::string& value, long long lo, long long hi,
                  const char* why) {
    long long v = parse_int(key, value);
    if (v < lo || v > hi)
        throw ConfigError("key '" + key + "': value " + value + " out of range (" + why + ")");
    return static_cast<int>(v);
}

inline double double_in(const std::string& key, const std::string& value, double lo, double hi,
                        const char* why) {
    double v = parse_double(key, value);
    if (!(v >= lo && v <= hi))
        throw ConfigError("key '" + key + "': value " + value + " out of range (" + why + ")");
    return v;
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

const long long kIntMax = 1 << 24;

// Applies one `section.key = value` assignment with type and range checks.
inline void config_set(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "model.dim") cfg.dim = int_in(key, value, 2, kIntMax, "dim >= 2");
    else if (key == "model.layers") cfg.layers = int_in(key, value, 1, 4096, "layers >= 1");
    else if (key == "model.heads") cfg.heads = int_in(key, value, 1, 4096, "heads >= 1");
    else if (key == "model.patch") cfg.patch = int_in(key, value, 1, 4096, "patch >= 1");
    else if (key == "model.image") cfg.image = int_in(key, value, 1, kIntMax, "image >= 1");
    else if (key == "model.classes") cfg.classes = int_in(key, value, 2, 255, "2 <= classes <= 255");
    else if (key == "model.prompt_tokens")
        cfg.prompt_tokens = int_in(key, value, 1, 4096, "prompt_tokens >= 1");
    else if (key == "peft.mode") cfg.mode = mode_from_name(value);
    else if (key == "peft.rank") cfg.rank = int_in(key, value, 1, kIntMax, "rank >= 1");
    else if (key == "peft.alpha_base")
        cfg.alpha_base = double_in(key, value, 1e-12, 1e12, "alpha_base > 0");
    else if (key == "peft.prefix_len")
        cfg.prefix_len = int_in(key, value, 1, kIntMax, "prefix_len >= 1");
    else if (key == "peft.d_mid") cfg.d_mid = int_in(key, value, 1, kIntMax, "d_mid >= 1");
    else if (key == "peft.lora_targets") {
        if (value != "q" && value != "v" && value != "qv")
            throw ConfigError("key '" + key + "': expected q, v, or qv, got '" + value + "'");
        cfg.lora_targets = value;
    } else if (key == "gate.threshold")
        cfg.gate_threshold = double_in(key, value, 0.0, 1.0, "0 <= threshold <= 1");
    else if (key == "gate.per_layer") cfg.gate_per_layer = parse_bool(key, value);
    else if (key == "gate.hidden") cfg.gate_hidden = int_in(key, value, 1, kIntMax, "hidden >= 1");
    else if (key == "train.lr") cfg.lr = double_in(key, value, 0.0, 1e6, "lr >= 0");
    else if (key == "train.weight_decay")
        cfg.weight_decay = double_in(key, value, 0.0, 1e6, "weight_decay >= 0");
    else if (key == "train.batch") cfg.batch = int_in(key, value, 1, kIntMax, "batch >= 1");
    else if (key == "train.steps") cfg.steps = int_in(key, value, 0, kIntMax, "steps >= 0");
    else if (key == "train.eval_every")
        cfg.eval_every = int_in(key, value, 1, kIntMax, "eval_every >= 1");
    else if (key == "data.source") {
        if (value != "synthetic" && value != "dir")
            throw ConfigError("key '" + key + "': expected synthetic or dir, got '" + value + "'");
        cfg.data_source = value;
    } else if (key == "data.domain") {
        if (value != "blobs" && value != "stripes" && value != "rings" && value != "checker")
            throw ConfigError("key '" + key + "': expected blobs, stripes, rings, or checker, got '" +
                              value + "'");
        cfg.domain = value;
    } else if (key == "data.sigma") cfg.sigma = double_in(key, value, 0.0, 1.0, "0 <= sigma <= 1");
    else if (key == "data.train_n") cfg.train_n = int_in(key, value, 1, kIntMax, "train_n >= 1");
    else if (key == "data.val_n") cfg.val_n = int_in(key, value, 1, kIntMax, "val_n >= 1");
    else if (key == "data.path") cfg.data_path = value;
    else if (key == "seed") cfg.seed = detail::parse_u64(key, value);
    else if (key == "out_dir") {
        if (value.empty()) throw ConfigError("key 'out_dir': must not be empty");
        cfg.out_dir = value;
    } else
        throw ConfigError("unknown key '" + key + "'");
}

// Cross-field constraints; build_model relies on these holding.
inline void validate_config(const ExperimentConfig& cfg) {
    if (cfg.dim % cfg.heads != 0)
        throw ConfigError("model.heads (" + std::to_string(cfg.heads) +
                          ") must divide model.dim (" + std::to_string(cfg.dim) + ")");
    if (cfg.image % cfg.patch != 0)
        throw ConfigError("model.patch (" + std::to_string(cfg.patch) +
                          ") must divide model.image (" + std::to_string(cfg.image) + ")");
    if (cfg.rank > cfg.dim)
        throw ConfigError("peft.rank (" + std::to_string(cfg.rank) +
                          ") must not exceed model.dim (" + std::to_string(cfg.dim) + ")");
    if (cfg.d_mid > cfg.dim)
        throw ConfigError("peft.d_mid (" + std::to_string(cfg.d_mid) +
                          ") must not exceed model.dim (" + std::to_string(cfg.dim) + ")");
    if (cfg.data_source == "dir" && cfg.data_path.empty())
        throw ConfigError("data.path is required when data.source = dir");
}

// Line-based `key = value` under `[section]` headers; '#' starts a comment.
// Keys land on top of `cfg`, so a partial file reconfigures a base config.
inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig cfg = {}) {
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header '" +
                                  t + "'");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError("line " + std::to_string(lineno) + ": empty section header");
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" +
                              t + "'");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": missing key before '='");
        std::string full = section.empty() ? key : section + "." + key;
        config_set(cfg, full, value);
    }
    validate_config(cfg);
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path, ExperimentConfig base = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), std::move(base));
}

// `section.key=value` from the command line; applied after the file.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "': expected key=value");
    std::string key = detail::trim(assignment.substr(0, eq));
    std::string value = detail::trim(assignment.substr(eq + 1));
    config_set(cfg, key, value);
}

// Stable, fully explicit echo of a config. parse(canonical(parse(x))) is
// identical to parse(x); numbers use shortest round-trip formatting.
inline std::string canonical_config(const ExperimentConfig& cfg) {
    using detail::num_str;
    std::ostringstream out;
    out << "seed = " << cfg.seed << "\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    out << "\n[data]\n";
    out << "domain = " << cfg.domain << "\n";
    out << "path = " << cfg.data_path << "\n";
    out << "sigma = " << num_str(cfg.sigma) << "\n";
    out << "source = " << cfg.data_source << "\n";
    out << "train_n = " << cfg.train_n << "\n";
    out << "val_n = " << cfg.val_n << "\n";
    out << "\n[gate]\n";
    out << "hidden = " << cfg.gate_hidden << "\n";
    out << "per_layer = " << (cfg.gate_per_layer ? "true" : "false") << "\n";
    out << "threshold = " << num_str(cfg.gate_threshold) << "\n";
    out << "\n[model]\n";
    out << "classes = " << cfg.classes << "\n";
    out << "dim = " << cfg.dim << "\n";
    out << "heads = " << cfg.heads << "\n";
    out << "image = " << cfg.image << "\n";
    out << "layers = " << cfg.layers << "\n";
    out << "patch = " << cfg.patch << "\n";
    out << "prompt_tokens = " << cfg.prompt_tokens << "\n";
    out << "\n[peft]\n";
    out << "alpha_base = " << num_str(cfg.alpha_base) << "\n";
    out << "d_mid = " << cfg.d_mid << "\n";
    out << "lora_targets = " << cfg.lora_targets << "\n";
    out << "mode = " << mode_name(cfg.mode) << "\n";
    out << "prefix_len = " << cfg.prefix_len << "\n";
    out << "rank = " << cfg.rank << "\n";
    out << "\n[train]\n";
    out << "batch = " << cfg.batch << "\n";
    out << "eval_every = " << cfg.eval_every << "\n";
    out << "lr = " << num_str(cfg.lr) << "\n";
    out << "steps = " << cfg.steps << "\n";
    out << "weight_decay = " << num_str(cfg.weight_decay) << "\n";
    return out.str();
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return canonical_config(a) == canonical_config(b);
}

}  // namespace mopeft
