#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <exception>
#include <filesystem>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "mopeft/config.hpp"
#include "mopeft/data.hpp"
#include "mopeft/gradcheck.hpp"
#include "mopeft/model.hpp"
#include "mopeft/train.hpp"

namespace mopeft {

struct CliOptions {
    std::string config_path;             // --config PATH
    std::vector<std::string> overrides;  // --set key=value, repeatable, in order
    std::string out_dir;                 // --out DIR (wins over file/default)
    bool force = false;                  // --force
    int parallel = 1;                    // --parallel N (sweep only)
    std::string axis;                    // sweep --axis
    std::vector<std::string> values;     // sweep --values v1,v2,...
};

// defaults (or `base`) -> config file -> --set overrides -> --out
inline ExperimentConfig resolve_config(const CliOptions& opts, ExperimentConfig base = {}) {
    ExperimentConfig cfg = std::move(base);
    if (!opts.config_path.empty()) cfg = parse_config_file(opts.config_path, std::move(cfg));
    for (const std::string& assignment : opts.overrides) apply_override(cfg, assignment);
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    validate_config(cfg);
    return cfg;
}

// One completed (or crashed) run per directory. The lock persists after a
// successful run, so re-targeting an existing run directory always takes
// --force; parallel sweep points never share a directory.
inline void acquire_run_lock(const std::filesystem::path& dir, bool force) {
    std::filesystem::create_directories(dir);
    std::filesystem::path lock = dir / ".lock";
    if (force) ::unlink(lock.c_str());
    int fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST)
            throw std::runtime_error("run directory '" + dir.string() +
                                     "' already holds a run (use --force to overwrite)");
        throw std::runtime_error("cannot create lock file '" + lock.string() + "': " +
                                 std::strerror(errno));
    }
    std::string note = "pid " + std::to_string(::getpid()) + "\n";
    ssize_t n = ::write(fd, note.data(), note.size());
    (void)n;
    ::close(fd);
}

inline Dataset make_dataset(const ExperimentConfig& cfg) {
    if (cfg.data_source == "dir") {
        Dataset ds = load_dataset(cfg.data_path);
        if (ds.image != cfg.image || ds.classes != cfg.classes)
            throw ConfigError("dataset at '" + cfg.data_path + "' is " +
                              std::to_string(ds.image) + "px/" + std::to_string(ds.classes) +
                              " classes but config wants " + std::to_string(cfg.image) + "px/" +
                              std::to_string(cfg.classes));
        return ds;
    }
    SyntheticTaskSpec spec;
    spec.domain = cfg.domain;
    spec.image = cfg.image;
    spec.classes = cfg.classes;
    spec.sigma = cfg.sigma;
    spec.train_n = cfg.train_n;
    spec.val_n = cfg.val_n;
    spec.seed = cfg.seed;
    return gen_synthetic(spec);
}

namespace detail {

inline void print_metrics(std::ostream& out, const std::vector<MetricsRow>& rows) {
    out << "epoch  split  loss      miou";
    if (!rows.empty() && rows.front().gated) out << "      g_lora   g_prefix g_adapter";
    out << "\n";
    char buf[160];
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-6d %-6s %-9.6g %-9.6g", r.epoch, r.split.c_str(),
                      r.loss, r.miou);
        out << buf;
        if (r.gated) {
            std::snprintf(buf, sizeof(buf), " %-8.4g %-8.4g %-8.4g", r.gate_mean[0],
                          r.gate_mean[1], r.gate_mean[2]);
            out << buf;
        }
        out << "\n";
    }
}

// Everything that pins checkpointed parameter shapes/semantics; data and
// threshold keys may differ between training and later evaluation.
inline std::string model_signature(const ExperimentConfig& cfg) {
    ExperimentConfig key = cfg;
    ExperimentConfig fixed;
    key.gate_threshold = fixed.gate_threshold;
    key.lr = fixed.lr;
    key.weight_decay = fixed.weight_decay;
    key.batch = fixed.batch;
    key.steps = fixed.steps;
    key.eval_every = fixed.eval_every;
    key.data_source = fixed.data_source;
    key.domain = fixed.domain;
    key.sigma = fixed.sigma;
    key.train_n = fixed.train_n;
    key.val_n = fixed.val_n;
    key.data_path = fixed.data_path;
    key.seed = fixed.seed;
    key.out_dir = fixed.out_dir;
    return canonical_config(key);
}

}  // namespace detail

struct RunOutcome {
    TrainResult result;
    ParamReport budget;
    std::filesystem::path dir;
};

// The full training pipeline for one resolved config: lock, data, train,
// artifacts (config.canonical, model.mpft, metrics.csv, gates.csv when gated).
inline RunOutcome run_training(const ExperimentConfig& cfg, bool force) {
    std::filesystem::path dir = cfg.out_dir;
    acquire_run_lock(dir, force);
    atomic_write_file(dir / "config.canonical", canonical_config(cfg));
    Dataset data = make_dataset(cfg);
    SegModel model = build_model(cfg);

    RunOutcome outcome;
    outcome.dir = dir;
    outcome.budget = count_trainable(model);
    outcome.result = train(model, data);
    write_metrics_csv(outcome.result.rows, dir / "metrics.csv");
    save_checkpoint(model, dir / "model.mpft");
    if (outcome.result.gated)
        write_gate_csv(selection_counts(outcome.result.final_val_telemetry, cfg.gate_threshold),
                       dir / "gates.csv");
    return outcome;
}

inline int cmd_train(const CliOptions& opts, std::ostream& out) {
    ExperimentConfig cfg = resolve_config(opts);
    out << "mode " << mode_name(cfg.mode) << ", out_dir " << cfg.out_dir << "\n";
    RunOutcome outcome = run_training(cfg, opts.force);
    out << format_param_report(outcome.budget);
    detail::print_metrics(out, outcome.result.rows);
    out << "artifacts under " << outcome.dir.string() << ": config.canonical, model.mpft, "
        << "metrics.csv" << (outcome.result.gated ? ", gates.csv" : "") << "\n";
    return 0;
}

inline int cmd_eval(const CliOptions& opts, std::ostream& out) {
    std::filesystem::path dir = resolve_config(opts).out_dir;
    SegModel model = load_checkpoint(dir / "model.mpft");
    ExperimentConfig cfg = resolve_config(opts, model.cfg);
    if (cfg.mode != model.cfg.mode)
        throw FormatError("checkpoint '" + (dir / "model.mpft").string() + "' was trained as " +
                          mode_name(model.cfg.mode) + "; cannot evaluate it as " +
                          mode_name(cfg.mode));
    if (detail::model_signature(cfg) != detail::model_signature(model.cfg))
        throw ConfigError("model/peft/gate overrides conflict with the checkpoint's "
                          "architecture; only data.*, gate.threshold, and train.* may differ");
    Dataset data = make_dataset(cfg);
    EvalResult ev = evaluate(model, data.val);
    out << "eval " << mode_name(cfg.mode) << " on " << data.val.size() << " " << cfg.domain
        << " val samples\n";
    out << "loss " << format_double(ev.loss, 6) << ", miou " << format_double(ev.miou, 6)
        << "\n";
    for (size_t c = 0; c < ev.per_class.size(); ++c)
        if (!std::isnan(ev.per_class[c]))
            out << "  class " << c << " iou " << format_double(ev.per_class[c], 6) << "\n";
    if (ev.gated)
        out << "gate means: lora " << format_double(ev.gate_mean[0], 6) << ", prefix "
            << format_double(ev.gate_mean[1], 6) << ", adapter "
            << format_double(ev.gate_mean[2], 6) << "\n";
    return 0;
}

constexpr size_t kGradcheckParamGuard = 200000;

inline int cmd_gradcheck(const CliOptions& opts, std::ostream& out) {
    ExperimentConfig cfg = resolve_config(opts);
    SegModel model = build_model(cfg);
    ParamReport budget = count_trainable(model);
    if (budget.total >= kGradcheckParamGuard)
        throw ConfigError("gradcheck guard: model has " + std::to_string(budget.total) +
                          " parameters (limit " + std::to_string(kGradcheckParamGuard) +
                          "); use a smaller config");
    NamedParams trainables = trainable_params(model);
    if (trainables.empty()) {
        out << "mode " << mode_name(cfg.mode)
            << " has no trainable parameters; gradient check passes vacuously\n";
        return 0;
    }
    // nudge zero-initialized attachment halves off their exact no-op point so
    // every parameter influences the loss
    uint64_t i = 0;
    for (auto& [name, p] : trainables) {
        auto rng = substream(cfg.seed, "gradcheck/perturb", i++);
        std::normal_distribution<double> dist(0.0, 0.05);
        for (double& v : p.data()) v += dist(rng);
    }
    Dataset data = make_dataset(cfg);
    if (data.train.empty()) throw ConfigError("gradcheck needs at least one training sample");
    size_t batch = std::min<size_t>(static_cast<size_t>(cfg.batch), data.train.size());
    auto loss = [&]() {
        Tensor total = Tensor::scalar(0.0);
        for (size_t s = 0; s < batch; ++s)
            total = add(total, cross_entropy(model_forward(model, data.train[s].image),
                                             data.train[s].mask));
        return scale(total, 1.0 / double(batch));
    };
    // the full-model loss runs through softmax/sigmoid chains whose curvature
    // puts the finite-difference error band near 1e-10 for a near-zero-gradient
    // coordinate; the comparison floor has to clear that band
    GradReport report = finite_diff_check(loss, trainables, 1e-5, 1e-3, 1e-6);
    out << "mode " << mode_name(cfg.mode) << ", " << report.coords_checked
        << " coordinates over " << trainables.size() << " tensors, batch " << batch << "\n";
    out << format_grad_report(report);
    return report.passed() ? 0 : 1;
}

inline int cmd_sweep(const CliOptions& opts, std::ostream& out) {
    if (opts.axis.empty()) throw ConfigError("sweep requires --axis");
    if (opts.values.empty()) throw ConfigError("sweep requires --values");
    ExperimentConfig base = resolve_config(opts);

    bool ok = false;
    if (opts.axis == "peft.rank")
        ok = base.mode == FineTuneMode::kLoRA || base.mode == FineTuneMode::kMoPEFT;
    else if (opts.axis == "peft.prefix_len")
        ok = base.mode == FineTuneMode::kVPTDeep || base.mode == FineTuneMode::kVPTShallow ||
             base.mode == FineTuneMode::kMoPEFT;
    else if (opts.axis == "peft.d_mid")
        ok = base.mode == FineTuneMode::kAdapter || base.mode == FineTuneMode::kMoPEFT;
    else
        throw ConfigError("sweep axis must be peft.rank, peft.prefix_len, or peft.d_mid; got '" +
                          opts.axis + "'");
    if (!ok)
        throw ConfigError("axis " + opts.axis + " does not apply to mode " +
                          mode_name(base.mode));

    std::filesystem::path root = base.out_dir;
    acquire_run_lock(root, opts.force);

    struct Point {
        std::string value;
        ExperimentConfig cfg;
        double final_miou = 0.0;
        size_t trainable = 0;
        std::exception_ptr error;
    };
    std::vector<Point> points;
    for (const std::string& v : opts.values) {
        Point p;
        p.value = v;
        p.cfg = base;
        config_set(p.cfg, opts.axis, v);
        p.cfg.out_dir = (root / (opts.axis + "=" + v)).string();
        validate_config(p.cfg);
        points.push_back(std::move(p));
    }

    auto run_point = [&](Point& p) {
        try {
            RunOutcome outcome = run_training(p.cfg, opts.force);
            p.trainable = outcome.budget.trainable;
            for (auto it = outcome.result.rows.rbegin(); it != outcome.result.rows.rend(); ++it)
                if (it->split == "val") {
                    p.final_miou = it->miou;
                    break;
                }
        } catch (...) {
            p.error = std::current_exception();
        }
    };

    int workers = std::max(1, opts.parallel);
    for (size_t start = 0; start < points.size(); start += static_cast<size_t>(workers)) {
        std::vector<std::thread> pool;
        for (size_t i = start; i < std::min(points.size(), start + workers); ++i)
            pool.emplace_back(run_point, std::ref(points[i]));
        for (std::thread& t : pool) t.join();
    }
    for (Point& p : points)
        if (p.error) std::rethrow_exception(p.error);

    std::string csv = "value,final_miou,trainable_params\n";
    out << "sweep " << opts.axis << " (" << mode_name(base.mode) << ")\n";
    for (const Point& p : points) {
        csv += p.value + "," + format_double(p.final_miou, 6) + "," +
               std::to_string(p.trainable) + "\n";
        out << "  " << opts.axis << "=" << p.value << ": final_miou "
            << format_double(p.final_miou, 6) << ", trainable " << p.trainable << "\n";
    }
    atomic_write_file(root / "summary.csv", csv);
    out << "summary at " << (root / "summary.csv").string() << "\n";
    return 0;
}

inline int cmd_report(const CliOptions& opts, std::ostream& out) {
    std::filesystem::path dir = resolve_config(opts).out_dir;
    std::filesystem::path gates_path = dir / "gates.csv";
    if (!std::filesystem::exists(gates_path))
        throw std::runtime_error("no gates.csv under '" + dir.string() +
                                 "' — report needs a completed gated (mopeft) run");
    SelectionCounts counts = read_gate_csv(gates_path);
    SegModel model = load_checkpoint(dir / "model.mpft");

    double tau = model.cfg.gate_threshold;
    std::filesystem::path canon = dir / "config.canonical";
    if (std::filesystem::exists(canon))
        tau = parse_config_file(canon.string()).gate_threshold;

    out << "gate selections over " << counts.total_samples << " samples (g > "
        << format_double(tau, 6) << ")\n";
    out << "layer    lora  prefix  adapter\n";
    char buf[96];
    for (int layer = 0; layer < counts.n_layers; ++layer) {
        const auto& row = counts.per_layer[static_cast<size_t>(layer)];
        std::snprintf(buf, sizeof(buf), "%-6d %6zu %7zu %8zu\n", layer, row[0], row[1], row[2]);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-6s %6zu %7zu %8zu\n", "ALL", counts.overall[0],
                  counts.overall[1], counts.overall[2]);
    out << buf;
    out << "\nparameter budget (" << mode_name(model.cfg.mode) << ")\n";
    out << format_param_report(count_trainable(model));
    return 0;
}

}  // namespace mopeft
