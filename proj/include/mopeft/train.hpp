#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mopeft/data.hpp"
#include "mopeft/model.hpp"

namespace mopeft {

// ---- loss and metrics ----------------------------------------------------------

namespace detail {

// out[i] = x(i, idx[i]); the per-row class pick inside cross-entropy.
inline Tensor pick_rows(const Tensor& x, std::vector<int> idx) {
    check_rank2(x, "pick_rows");
    int rows = x.extent(0), cols = x.extent(1);
    if (static_cast<int>(idx.size()) != rows)
        throw std::invalid_argument("pick_rows: " + std::to_string(idx.size()) +
                                    " indices for " + std::to_string(rows) + " rows");
    std::vector<double> out(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        int c = idx[static_cast<size_t>(i)];
        if (c < 0 || c >= cols)
            throw std::invalid_argument("pick_rows: class " + std::to_string(c) +
                                        " out of range [0, " + std::to_string(cols) + ")");
        out[static_cast<size_t>(i)] = x.data()[static_cast<size_t>(i) * cols + c];
    }
    return make_op("pick_rows", {rows, 1}, std::move(out), {x},
                   [idx = std::move(idx), cols](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (size_t i = 0; i < idx.size(); ++i)
                           in.grad[i * cols + static_cast<size_t>(idx[i])] += self.grad[i];
                   });
}

}  // namespace detail

// Mean over pixels of -log softmax(logits)[target]; logits [H x W x C],
// target a row-major class grid.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<uint8_t>& target) {
    if (logits.rank() != 3)
        throw std::invalid_argument("cross_entropy: logits must be [H x W x C], got " +
                                    shape_str(logits.shape()));
    int n = logits.extent(0) * logits.extent(1);
    int c = logits.extent(2);
    if (static_cast<int>(target.size()) != n)
        throw std::invalid_argument("cross_entropy: target has " +
                                    std::to_string(target.size()) + " pixels, logits " +
                                    std::to_string(n));
    std::vector<int> idx(target.size());
    for (size_t i = 0; i < target.size(); ++i) {
        if (target[i] >= c)
            throw std::invalid_argument("cross_entropy: class " + std::to_string(int(target[i])) +
                                        " out of range [0, " + std::to_string(c) + ")");
        idx[i] = target[i];
    }
    Tensor z = reshape(logits, {n, c});
    Tensor shifted = sub_col(z, detached_row_max({z}));
    Tensor log_den = log(row_sum(exp(shifted)));
    return mean_all(sub(log_den, detail::pick_rows(shifted, std::move(idx))));
}

inline std::vector<uint8_t> predict_mask(const Tensor& logits) {
    if (logits.rank() != 3)
        throw std::invalid_argument("predict_mask: logits must be [H x W x C], got " +
                                    shape_str(logits.shape()));
    int n = logits.extent(0) * logits.extent(1);
    int c = logits.extent(2);
    std::vector<uint8_t> pred(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data().data() + static_cast<size_t>(i) * c;
        pred[static_cast<size_t>(i)] =
            static_cast<uint8_t>(std::max_element(row, row + c) - row);
    }
    return pred;
}

struct IouResult {
    double miou = 0.0;
    std::vector<double> per_class;  // NaN for classes absent from both grids
};

// IoU per class over one grid pair; classes absent from both prediction and
// ground truth are excluded from the mean.
inline IouResult miou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                      int n_classes) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("miou: grid extents differ (" + std::to_string(pred.size()) +
                                    " vs " + std::to_string(gt.size()) + " pixels)");
    if (n_classes < 1) throw std::invalid_argument("miou: n_classes must be >= 1");
    std::vector<size_t> inter(static_cast<size_t>(n_classes), 0);
    std::vector<size_t> uni(static_cast<size_t>(n_classes), 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= n_classes || gt[i] >= n_classes)
            throw std::invalid_argument("miou: class value out of range");
        if (pred[i] == gt[i]) {
            ++inter[pred[i]];
            ++uni[pred[i]];
        } else {
            ++uni[pred[i]];
            ++uni[gt[i]];
        }
    }
    IouResult r;
    r.per_class.assign(static_cast<size_t>(n_classes), std::nan(""));
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < n_classes; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;
        double iou = double(inter[static_cast<size_t>(c)]) / double(uni[static_cast<size_t>(c)]);
        r.per_class[static_cast<size_t>(c)] = iou;
        sum += iou;
        ++present;
    }
    r.miou = present ? sum / present : 0.0;
    return r;
}

// ---- optimizer -------------------------------------------------------------------

// Bias-corrected Adam with decoupled multiplicative weight decay; gate
// parameters are exempt from decay so regularization cannot push routing
// toward zero on its own.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step = 0;
    std::map<std::string, std::vector<double>> m, v;
};

inline void adam_step(AdamState& state, NamedParams& params) {
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (auto& [name, p] : params) {
        const std::vector<double>& g = p.impl()->grad;
        std::vector<double>& w = p.data();
        if (g.size() != w.size())
            throw std::logic_error("adam_step: parameter '" + name + "' has no gradient");
        std::vector<double>& m = state.m[name];
        std::vector<double>& v = state.v[name];
        if (m.empty()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        bool decay = state.weight_decay > 0.0 && name.rfind("gate.", 0) != 0;
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            if (decay) w[i] *= 1.0 - state.lr * state.weight_decay;
            w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---- evaluation ------------------------------------------------------------------

struct EvalResult {
    double loss = 0.0;
    double miou = 0.0;                  // dataset-level: IoU from split-wide counts
    std::vector<double> per_class;      // NaN where a class never occurs
    std::array<double, 3> gate_mean{};  // lora, prefix, adapter; valid when gated
    bool gated = false;
    GateTelemetry telemetry;            // the pass's records, for gates.csv
};

inline EvalResult evaluate(SegModel& model, const std::vector<Sample>& split) {
    EvalResult res;
    res.gated = model.gated();
    int classes = model.cfg.classes;
    std::vector<size_t> inter(static_cast<size_t>(classes), 0);
    std::vector<size_t> uni(static_cast<size_t>(classes), 0);
    for (size_t s = 0; s < split.size(); ++s) {
        ForwardOptions opts;
        if (res.gated) {
            opts.telemetry = &res.telemetry;
            opts.sample_id = static_cast<int>(s);
        }
        Tensor logits = model_forward(model, split[s].image, opts);
        res.loss += cross_entropy(logits, split[s].mask).item();
        std::vector<uint8_t> pred = predict_mask(logits);
        const std::vector<uint8_t>& gt = split[s].mask;
        for (size_t i = 0; i < pred.size(); ++i) {
            if (gt[i] >= classes)
                throw std::invalid_argument("evaluate: mask class " +
                                            std::to_string(int(gt[i])) + " out of range");
            if (pred[i] == gt[i]) {
                ++inter[pred[i]];
                ++uni[pred[i]];
            } else {
                ++uni[pred[i]];
                ++uni[gt[i]];
            }
        }
    }
    if (!split.empty()) res.loss /= double(split.size());
    res.per_class.assign(static_cast<size_t>(classes), std::nan(""));
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;
        double iou = double(inter[static_cast<size_t>(c)]) / double(uni[static_cast<size_t>(c)]);
        res.per_class[static_cast<size_t>(c)] = iou;
        sum += iou;
        ++present;
    }
    res.miou = present ? sum / present : 0.0;
    if (res.gated) {
        std::array<double, 3> total{};
        std::array<size_t, 3> count{};
        for (const GateRecord& r : res.telemetry.records) {
            total[static_cast<size_t>(r.method)] += r.g;
            ++count[static_cast<size_t>(r.method)];
        }
        for (int m = 0; m < 3; ++m)
            res.gate_mean[static_cast<size_t>(m)] =
                count[static_cast<size_t>(m)]
                    ? total[static_cast<size_t>(m)] / double(count[static_cast<size_t>(m)])
                    : 0.0;
    }
    return res;
}

// ---- training loop ---------------------------------------------------------------

struct TrainResult {
    std::vector<MetricsRow> rows;
    std::vector<double> step_loss;  // mean micro-batch loss per optimizer step
    GateTelemetry final_val_telemetry;
    bool gated = false;
};

namespace detail {

inline MetricsRow to_row(int epoch, const char* split, const EvalResult& ev) {
    MetricsRow row;
    row.epoch = epoch;
    row.split = split;
    row.loss = ev.loss;
    row.miou = ev.miou;
    row.gated = ev.gated;
    row.gate_mean = ev.gate_mean;
    return row;
}

inline double max_abs_grad(const NamedParams& params) {
    double worst = 0.0;
    for (const auto& [name, p] : params)
        for (double g : p.impl()->grad) worst = std::max(worst, std::abs(g));
    return worst;
}

}  // namespace detail

// Fixed-step loop: seeded shuffle, micro-batch accumulation, Adam update,
// periodic evaluation. Baseline has nothing to train and emits a single
// evaluation row. A non-finite loss aborts with diagnostics rather than
// skipping the step. Frozen parameters are asserted bit-identical at the end.
inline TrainResult train(SegModel& model, const Dataset& data) {
    const ExperimentConfig& cfg = model.cfg;
    TrainResult result;
    result.gated = model.gated();

    if (cfg.mode == FineTuneMode::kBaseline) {
        EvalResult ev = evaluate(model, data.val);
        result.rows.push_back(detail::to_row(0, "val", ev));
        result.final_val_telemetry = std::move(ev.telemetry);
        return result;
    }
    if (data.train.empty()) throw std::invalid_argument("train: empty training split");

    NamedParams trainables = trainable_params(model);
    if (trainables.empty()) throw std::logic_error("train: no trainable parameters");
    std::vector<std::pair<std::string, std::vector<double>>> frozen_snapshot;
    visit_params(model, [&](const std::string& name, Tensor& t) {
        if (!t.requires_grad()) frozen_snapshot.emplace_back(name, t.data());
    });

    AdamState adam;
    adam.lr = cfg.lr;
    adam.weight_decay = cfg.weight_decay;

    auto eval_both = [&](int epoch) {
        EvalResult tr = evaluate(model, data.train);
        result.rows.push_back(detail::to_row(epoch, "train", tr));
        EvalResult va = evaluate(model, data.val);
        result.rows.push_back(detail::to_row(epoch, "val", va));
        result.final_val_telemetry = std::move(va.telemetry);
    };

    auto shuffle_rng = substream(cfg.seed, "train/shuffle", 0);
    std::vector<size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // forces a shuffle before the first draw

    int epoch = 0;
    eval_both(epoch++);
    for (int step = 1; step <= cfg.steps; ++step) {
        for (auto& [name, p] : trainables) p.zero_grad();
        int batch = std::min<int>(cfg.batch, static_cast<int>(data.train.size()));
        double batch_loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            const Sample& s = data.train[order[cursor++]];
            Tensor loss = cross_entropy(model_forward(model, s.image), s.mask);
            double v = loss.item();
            if (!std::isfinite(v))
                throw TrainAbort("non-finite loss " + std::to_string(v) + " at step " +
                                 std::to_string(step) + " (lr " + format_double(cfg.lr, 6) +
                                 ", max |grad| " +
                                 format_double(detail::max_abs_grad(trainables), 6) + ")");
            batch_loss += v / batch;
            backward(scale(loss, 1.0 / batch));
        }
        result.step_loss.push_back(batch_loss);
        adam_step(adam, trainables);
        if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps)
            eval_both(epoch++);
    }

    for (const auto& [name, before] : frozen_snapshot) {
        bool ok = false;
        visit_params(model, [&](const std::string& n, Tensor& t) {
            if (n == name) ok = t.data() == before;
        });
        if (!ok)
            throw std::logic_error("train: frozen parameter '" + name + "' changed during training");
    }
    return result;
}

}  // namespace mopeft
