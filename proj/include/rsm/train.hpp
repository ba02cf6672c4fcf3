#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "rsm/dataset.hpp"
#include "rsm/metrics.hpp"
#include "rsm/model.hpp"
#include "rsm/synthetic.hpp"

namespace rsm {

// ---------------------------------------------------------------------------
// optimizer and schedule
// ---------------------------------------------------------------------------

// AdamW with decoupled weight decay: the decay term lr*wd*param is applied
// separately from the bias-corrected adaptive step. A step with any
// non-finite gradient is skipped (and reported via the return value) without
// advancing the moment estimates.
template <std::floating_point T>
class AdamW {
public:
    explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    bool step(const std::vector<Tensor<T>*>& params, const std::vector<std::vector<T>>& grads,
              double lr) {
        if (params.size() != grads.size()) fail("AdamW::step: params/grads size mismatch");
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (static_cast<i64>(grads[p].size()) != params[p]->numel())
                fail("AdamW::step: gradient size mismatch at parameter " + std::to_string(p));
            for (const T g : grads[p])
                if (!std::isfinite(g)) return false;
        }
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                m_[p].assign(grads[p].size(), T(0));
                v_[p].assign(grads[p].size(), T(0));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            const T* old = params[p]->ptr();
            std::vector<T> next(static_cast<std::size_t>(params[p]->numel()));
            for (std::size_t i = 0; i < next.size(); ++i) {
                const T g = grads[p][i];
                m_[p][i] = static_cast<T>(beta1_) * m_[p][i] + static_cast<T>(1.0 - beta1_) * g;
                v_[p][i] = static_cast<T>(beta2_) * v_[p][i] + static_cast<T>(1.0 - beta2_) * g * g;
                const double mhat = static_cast<double>(m_[p][i]) / bc1;
                const double vhat = static_cast<double>(v_[p][i]) / bc2;
                const double adaptive = lr * mhat / (std::sqrt(vhat) + eps_);
                const double decay = lr * wd_ * static_cast<double>(old[i]);
                next[i] = static_cast<T>(static_cast<double>(old[i]) - adaptive - decay);
            }
            *params[p] = Tensor<T>::from(params[p]->shape, std::move(next));
        }
        return true;
    }

    i64 steps_applied() const { return t_; }

private:
    double wd_, beta1_, beta2_, eps_;
    i64 t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// Linear warmup from 0 to lr0, then cosine annealing to 0 at total_steps.
inline double cosine_warmup_lr(i64 step, i64 warmup_steps, i64 total_steps, double lr0) {
    if (step < 0 || step > total_steps) fail("cosine_warmup_lr: step out of [0, total_steps]");
    if (warmup_steps >= total_steps) fail("cosine_warmup_lr: warmup must end before total_steps");
    if (warmup_steps > 0 && step < warmup_steps)
        return lr0 * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr0 = 5e-4;
    double weight_decay = 0.05;
    i64 warmup_steps = -1;  // -1: 5% of total steps
    i64 epochs = 100;
    i64 batch_size = 32;
    u64 seed = 0;
    bool aug_random_crop = false;
    bool aug_hflip = false;
    bool aug_vflip = false;
    i64 threads = 0;                     // 0: one per hardware thread
    double early_stop_train_acc = -1.0;  // <0: never stop early
    bool eval_each_epoch = true;

    void validate() const {
        if (lr0 < 0.0) fail("TrainConfig: negative learning rate");
        if (epochs < 1) fail("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) fail("TrainConfig: batch_size must be >= 1");
    }
};

struct EpochLog {
    i64 epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = -1.0;  // <0 when no validation set
    double val_macro_f1 = -1.0;
};

struct TrainResult {
    ModelParams<float> params;
    ChannelStats stats;
    std::vector<EpochLog> log;
    std::string log_text;  // deterministic per-epoch lines
    bool diverged = false;
    i64 skipped_steps = 0;
    i64 epochs_run = 0;
};

// Seeded pad-and-crop plus optional mirror flips; train-time only.
Tensor<float> augment_image(const Tensor<float>& image, const TrainConfig& cfg, Rng& rng);

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const Dataset& train_data, const Dataset* val_data);

// Deterministic batched evaluation; returns metrics and mean loss.
std::pair<MetricsReport, double> evaluate(const Dataset& data, const ModelParams<float>& params,
                                          const ModelConfig& cfg, const ChannelStats& stats,
                                          u64 eval_seed, i64 threads);

std::vector<i64> predict(const Dataset& data, const ModelParams<float>& params,
                         const ModelConfig& cfg, const ChannelStats& stats, u64 eval_seed,
                         i64 threads);

// ---------------------------------------------------------------------------
// ablation suites
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string label;
    double precision = 0.0, recall = 0.0, f1 = 0.0;  // validation macro means over seeds
};

struct AblationResult {
    std::string suite;
    std::vector<AblationRow> rows;
    std::string table_text;
};

// Benchmark settings shared by all suites: the synthetic gratings task at a
// noise level placed so a forward-only model lands mid-range, leaving
// headroom for the multi-path variants.
struct AblationBenchmark {
    SyntheticDatasetSpec data;   // train split; val uses seed+1
    ModelConfig model;           // path/pe/head fields are overridden per row
    TrainConfig trainer;
    i64 num_seeds = 3;

    static AblationBenchmark defaults();
};

AblationResult run_ablation(const std::string& suite_id, const AblationBenchmark& bench);

}  // namespace rsm
