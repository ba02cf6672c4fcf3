#include "rsm/train.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <functional>
#include <thread>

namespace rsm {

namespace {

constexpr i64 kGradChunk = 8;  // samples per gradient chunk; fixes the reduction order

// Runs fn(0..n_chunks) across up to `threads` workers. Each chunk writes only
// its own output slot, and chunk results are combined in index order by the
// caller, so the outcome is identical for any worker count.
void run_chunks(i64 n_chunks, i64 threads, const std::function<void(i64)>& fn) {
    if (threads <= 0) threads = static_cast<i64>(std::thread::hardware_concurrency());
    threads = std::max<i64>(1, std::min(threads, n_chunks));
    if (threads == 1) {
        for (i64 i = 0; i < n_chunks; ++i) fn(i);
        return;
    }
    std::atomic<i64> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (i64 w = 0; w < threads; ++w)
        pool.emplace_back([&] {
            i64 i;
            while ((i = next.fetch_add(1)) < n_chunks) fn(i);
        });
    for (auto& t : pool) t.join();
}

std::vector<float> mirror(const Tensor<float>& image, bool horizontal) {
    const i64 h = image.shape[0], w = image.shape[1];
    std::vector<float> out(static_cast<std::size_t>(image.numel()));
    const float* p = image.ptr();
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x) {
            const i64 sy = horizontal ? y : h - 1 - y;
            const i64 sx = horizontal ? w - 1 - x : x;
            for (i64 c = 0; c < 3; ++c)
                out[static_cast<std::size_t>((y * w + x) * 3 + c)] = p[(sy * w + sx) * 3 + c];
        }
    return out;
}

}  // namespace

Tensor<float> augment_image(const Tensor<float>& image, const TrainConfig& cfg, Rng& rng) {
    Tensor<float> out = image;
    if (cfg.aug_random_crop) {
        const i64 h = out.shape[0], w = out.shape[1];
        const i64 pad = std::max<i64>(1, std::min(h, w) / 8);
        const i64 dy = static_cast<i64>(rng.below(static_cast<u64>(2 * pad + 1)));
        const i64 dx = static_cast<i64>(rng.below(static_cast<u64>(2 * pad + 1)));
        std::vector<float> cropped(static_cast<std::size_t>(out.numel()), 0.0f);
        const float* p = out.ptr();
        for (i64 y = 0; y < h; ++y)
            for (i64 x = 0; x < w; ++x) {
                const i64 sy = y + dy - pad;  // source inside the padded frame
                const i64 sx = x + dx - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                for (i64 c = 0; c < 3; ++c)
                    cropped[static_cast<std::size_t>((y * w + x) * 3 + c)] = p[(sy * w + sx) * 3 + c];
            }
        out = Tensor<float>::from(out.shape, std::move(cropped));
    }
    if (cfg.aug_hflip && rng.below(2) == 1) out = Tensor<float>::from(out.shape, mirror(out, true));
    if (cfg.aug_vflip && rng.below(2) == 1) out = Tensor<float>::from(out.shape, mirror(out, false));
    return out;
}

namespace {

struct ChunkOutput {
    std::vector<std::vector<float>> grads;
    double loss_sum = 0.0;
    i64 correct = 0;
    i64 count = 0;
    std::exception_ptr error;
};

std::vector<std::string> param_names(ModelParams<float>& params) {
    std::vector<std::string> names;
    visit_params(params, [&](const std::string& n, Tensor<float>&) { names.push_back(n); });
    return names;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const Dataset& train_data, const Dataset* val_data) {
    model_cfg.validate();
    train_cfg.validate();
    if (train_data.size() < 1) fail("train: empty training set");
    if (train_data.num_classes() != model_cfg.num_classes)
        fail("train: dataset has " + std::to_string(train_data.num_classes()) +
             " classes but the model expects " + std::to_string(model_cfg.num_classes));

    TrainResult result;
    result.stats = compute_channel_stats(train_data);
    result.params = init_model_params<float>(model_cfg, train_cfg.seed);

    const i64 n = train_data.size();
    const i64 batches_per_epoch = (n + train_cfg.batch_size - 1) / train_cfg.batch_size;
    const i64 total_steps = train_cfg.epochs * batches_per_epoch;
    const i64 warmup = train_cfg.warmup_steps >= 0 ? train_cfg.warmup_steps
                                                   : total_steps * 5 / 100;
    if (warmup >= total_steps) fail("train: warmup_steps must be smaller than total steps");

    std::vector<Tensor<float>*> param_ptrs;
    visit_params(result.params, [&](const std::string&, Tensor<float>& t) { param_ptrs.push_back(&t); });
    AdamW<float> opt(train_cfg.weight_decay);

    ModelParams<float> last_good = result.params;
    char line[256];
    i64 global_step = 0;

    for (i64 epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        Rng order_rng(mix64(train_cfg.seed, static_cast<u64>(epoch), 0x6f72646572ULL));
        const auto order = order_rng.permutation(n);

        double epoch_loss = 0.0;
        i64 epoch_correct = 0, epoch_seen = 0;
        double last_lr = 0.0;
        bool aborted = false;
        std::string abort_reason;

        for (i64 batch = 0; batch < batches_per_epoch && !aborted; ++batch) {
            const i64 begin = batch * train_cfg.batch_size;
            const i64 end = std::min(n, begin + train_cfg.batch_size);
            const i64 bsize = end - begin;
            const i64 n_chunks = (bsize + kGradChunk - 1) / kGradChunk;
            std::vector<ChunkOutput> chunks(static_cast<std::size_t>(n_chunks));

            run_chunks(n_chunks, train_cfg.threads, [&](i64 ci) {
                auto& out = chunks[static_cast<std::size_t>(ci)];
                try {
                    out.grads.resize(param_ptrs.size());
                    for (std::size_t p = 0; p < param_ptrs.size(); ++p)
                        out.grads[p].assign(static_cast<std::size_t>(param_ptrs[p]->numel()), 0.0f);
                    const i64 c_begin = begin + ci * kGradChunk;
                    const i64 c_end = std::min(end, c_begin + kGradChunk);
                    for (i64 s = c_begin; s < c_end; ++s) {
                        const i64 di = order[static_cast<std::size_t>(s)];
                        Sample sample = train_data.get(di);
                        Rng aug_rng(mix64(train_cfg.seed, static_cast<u64>(epoch),
                                          static_cast<u64>(di), 0x617567ULL));
                        auto image = normalize_image(augment_image(sample.image, train_cfg, aug_rng),
                                                     result.stats);

                        Tape<float> tape;
                        auto bound = bind_params(result.params, tape);
                        const u64 fwd_seed =
                            mix64(train_cfg.seed, static_cast<u64>(epoch), static_cast<u64>(di));
                        auto logits = model_forward_sample(image, bound, model_cfg, fwd_seed, true);

                        i64 argmax = 0;
                        for (i64 c = 1; c < model_cfg.num_classes; ++c)
                            if (logits.at(c) > logits.at(argmax)) argmax = c;
                        out.correct += argmax == sample.label ? 1 : 0;
                        ++out.count;

                        auto loss = cross_entropy(reshape(logits, {1, model_cfg.num_classes}),
                                                  {sample.label});
                        out.loss_sum += static_cast<double>(loss.at(0));

                        auto grads = tape.backward(loss);
                        std::size_t p = 0;
                        visit_params(bound, [&](const std::string&, Tensor<float>& t) {
                            const auto g = grads.grad(t);
                            for (i64 i = 0; i < g.numel(); ++i) out.grads[p][static_cast<std::size_t>(i)] += g.at(i);
                            ++p;
                        });
                    }
                } catch (...) {
                    out.error = std::current_exception();
                }
            });

            for (const auto& c : chunks) {
                if (!c.error) continue;
                try {
                    std::rethrow_exception(c.error);
                } catch (const std::exception& e) {
                    abort_reason = e.what();
                }
                aborted = true;
            }
            if (aborted) break;

            // combine chunk gradients in chunk order and average over the batch
            std::vector<std::vector<float>> batch_grads(param_ptrs.size());
            for (std::size_t p = 0; p < param_ptrs.size(); ++p)
                batch_grads[p].assign(static_cast<std::size_t>(param_ptrs[p]->numel()), 0.0f);
            double batch_loss = 0.0;
            for (const auto& c : chunks) {
                for (std::size_t p = 0; p < param_ptrs.size(); ++p)
                    for (std::size_t i = 0; i < batch_grads[p].size(); ++i)
                        batch_grads[p][i] += c.grads[p][i];
                batch_loss += c.loss_sum;
                epoch_correct += c.correct;
                epoch_seen += c.count;
            }
            const float inv_b = 1.0f / static_cast<float>(bsize);
            for (auto& g : batch_grads)
                for (auto& v : g) v *= inv_b;
            batch_loss /= static_cast<double>(bsize);
            epoch_loss += batch_loss * static_cast<double>(bsize);

            if (!std::isfinite(batch_loss)) {
                abort_reason = "training loss is not finite";
                aborted = true;
                break;
            }

            last_lr = cosine_warmup_lr(global_step, warmup, total_steps, train_cfg.lr0);
            if (!opt.step(param_ptrs, batch_grads, last_lr)) {
                ++result.skipped_steps;
                std::snprintf(line, sizeof(line), "step %lld skipped: non-finite gradients\n",
                              static_cast<long long>(global_step));
                result.log_text += line;
            }
            ++global_step;
        }

        if (aborted) {
            result.params = last_good;
            result.diverged = true;
            result.log_text += "aborted: " + abort_reason + " (restored last good checkpoint)\n";
            break;
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = last_lr;
        entry.train_loss = epoch_loss / static_cast<double>(epoch_seen);
        entry.train_accuracy = static_cast<double>(epoch_correct) / static_cast<double>(epoch_seen);

        if (val_data && train_cfg.eval_each_epoch) {
            auto [rep, vloss] = evaluate(*val_data, result.params, model_cfg, result.stats,
                                         mix64(train_cfg.seed, 0x6576616cULL), train_cfg.threads);
            entry.val_accuracy = rep.accuracy;
            entry.val_macro_f1 = rep.macro_f1;
            std::snprintf(line, sizeof(line),
                          "epoch %lld lr %.6e loss %.6f train_acc %.4f val_acc %.4f val_f1 %.4f\n",
                          static_cast<long long>(epoch), entry.lr, entry.train_loss,
                          entry.train_accuracy, entry.val_accuracy, entry.val_macro_f1);
        } else {
            std::snprintf(line, sizeof(line), "epoch %lld lr %.6e loss %.6f train_acc %.4f\n",
                          static_cast<long long>(epoch), entry.lr, entry.train_loss,
                          entry.train_accuracy);
        }
        result.log_text += line;
        result.log.push_back(entry);
        result.epochs_run = epoch + 1;
        last_good = result.params;

        if (train_cfg.early_stop_train_acc > 0.0 &&
            entry.train_accuracy >= train_cfg.early_stop_train_acc) {
            // confirm with a deterministic eval-mode pass before stopping
            auto [rep, tloss] = evaluate(train_data, result.params, model_cfg, result.stats,
                                         mix64(train_cfg.seed, 0x6576616cULL), train_cfg.threads);
            if (rep.accuracy >= train_cfg.early_stop_train_acc) {
                std::snprintf(line, sizeof(line), "early stop at epoch %lld: train_acc %.4f\n",
                              static_cast<long long>(epoch), rep.accuracy);
                result.log_text += line;
                break;
            }
        }
    }
    return result;
}

std::vector<i64> predict(const Dataset& data, const ModelParams<float>& params,
                         const ModelConfig& cfg, const ChannelStats& stats, u64 eval_seed,
                         i64 threads) {
    const i64 n = data.size();
    if (n < 1) fail("predict: empty dataset");
    std::vector<i64> preds(static_cast<std::size_t>(n));
    constexpr i64 kEvalChunk = 16;
    const i64 n_chunks = (n + kEvalChunk - 1) / kEvalChunk;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));
    run_chunks(n_chunks, threads, [&](i64 ci) {
        try {
            const i64 begin = ci * kEvalChunk;
            const i64 end = std::min(n, begin + kEvalChunk);
            for (i64 i = begin; i < end; ++i) {
                auto image = normalize_image(data.get(i).image, stats);
                auto logits = model_forward_sample(image, params, cfg, eval_seed, false);
                i64 argmax = 0;
                for (i64 c = 1; c < cfg.num_classes; ++c)
                    if (logits.at(c) > logits.at(argmax)) argmax = c;
                preds[static_cast<std::size_t>(i)] = argmax;
            }
        } catch (...) {
            errors[static_cast<std::size_t>(ci)] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return preds;
}

std::pair<MetricsReport, double> evaluate(const Dataset& data, const ModelParams<float>& params,
                                          const ModelConfig& cfg, const ChannelStats& stats,
                                          u64 eval_seed, i64 threads) {
    const i64 n = data.size();
    if (n < 1) fail("evaluate: empty dataset");
    std::vector<i64> preds(static_cast<std::size_t>(n)), labels(static_cast<std::size_t>(n));
    std::vector<double> losses(static_cast<std::size_t>(n));
    constexpr i64 kEvalChunk = 16;
    const i64 n_chunks = (n + kEvalChunk - 1) / kEvalChunk;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));
    run_chunks(n_chunks, threads, [&](i64 ci) {
        try {
            const i64 begin = ci * kEvalChunk;
            const i64 end = std::min(n, begin + kEvalChunk);
            for (i64 i = begin; i < end; ++i) {
                Sample sample = data.get(i);
                auto image = normalize_image(sample.image, stats);
                auto logits = model_forward_sample(image, params, cfg, eval_seed, false);
                i64 argmax = 0;
                for (i64 c = 1; c < cfg.num_classes; ++c)
                    if (logits.at(c) > logits.at(argmax)) argmax = c;
                preds[static_cast<std::size_t>(i)] = argmax;
                labels[static_cast<std::size_t>(i)] = sample.label;
                losses[static_cast<std::size_t>(i)] = static_cast<double>(
                    cross_entropy(reshape(logits, {1, cfg.num_classes}), {sample.label}).at(0));
            }
        } catch (...) {
            errors[static_cast<std::size_t>(ci)] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    double loss = 0.0;
    for (double v : losses) loss += v;
    return {macro_prf1(preds, labels, data.num_classes()), loss / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// ablation suites
// ---------------------------------------------------------------------------

AblationBenchmark AblationBenchmark::defaults() {
    AblationBenchmark b;
    b.data.num_classes = 8;
    b.data.samples_per_class = 200;
    b.data.extent = 16;
    b.data.seed = 11;
    b.data.noise_sigma = 2.0;
    b.data.amplitude = 1.0;

    b.model.num_blocks = 2;
    b.model.hidden_size = 32;
    b.model.intermediate_size = 64;
    b.model.time_step_rank = 4;
    b.model.ssm_state_size = 4;
    b.model.image_h = b.model.image_w = 16;
    b.model.patch_kernel = 4;
    b.model.patch_stride = 2;
    b.model.num_classes = 8;
    b.model.pe_kind = PeKind::Learnable;
    b.model.head_kind = HeadKind::MeanPool;

    b.trainer.lr0 = 3e-3;
    b.trainer.weight_decay = 0.05;
    b.trainer.epochs = 12;
    b.trainer.batch_size = 32;
    b.trainer.eval_each_epoch = false;
    b.num_seeds = 3;
    return b;
}

namespace {

struct Variant {
    std::string label;
    std::function<void(ModelConfig&, SyntheticDatasetSpec&)> apply;
    std::string row_prefix;  // printed in the paper-style table layout
};

std::vector<Variant> suite_variants(const std::string& suite_id) {
    using P = PathKind;
    if (suite_id == "paths") {
        return {
            {"forward",
             [](ModelConfig& m, SyntheticDatasetSpec&) {
                 m.paths = {P::Forward};
                 m.gate_fusion = false;
             },
             "  x                            -  "},
            {"fwd+rev mean",
             [](ModelConfig& m, SyntheticDatasetSpec&) {
                 m.paths = {P::Forward, P::Reverse};
                 m.gate_fusion = false;
             },
             "  x        x                Mean  "},
            {"fwd+rev gate",
             [](ModelConfig& m, SyntheticDatasetSpec&) {
                 m.paths = {P::Forward, P::Reverse};
                 m.gate_fusion = true;
             },
             "  x        x                Gate  "},
            {"fwd+rev+shuffle gate",
             [](ModelConfig& m, SyntheticDatasetSpec&) {
                 m.paths = {P::Forward, P::Reverse, P::Shuffle};
                 m.gate_fusion = true;
             },
             "  x        x        x       Gate  "},
        };
    }
    if (suite_id == "pe") {
        return {
            {"none", [](ModelConfig& m, SyntheticDatasetSpec&) { m.pe_kind = PeKind::None; }, "  None       "},
            {"fourier", [](ModelConfig& m, SyntheticDatasetSpec&) { m.pe_kind = PeKind::Fourier; }, "  Fourier    "},
            {"learnable", [](ModelConfig& m, SyntheticDatasetSpec&) { m.pe_kind = PeKind::Learnable; },
             "  Learnable  "},
        };
    }
    if (suite_id == "head") {
        return {
            {"cls-head", [](ModelConfig& m, SyntheticDatasetSpec&) { m.head_kind = HeadKind::ClsHead; },
             "  Head       "},
            {"cls-tail", [](ModelConfig& m, SyntheticDatasetSpec&) { m.head_kind = HeadKind::ClsTail; },
             "  Tail       "},
            {"cls-head+tail",
             [](ModelConfig& m, SyntheticDatasetSpec&) { m.head_kind = HeadKind::ClsHeadTail; },
             "  Head+Tail  "},
            {"cls-middle",
             [](ModelConfig& m, SyntheticDatasetSpec&) { m.head_kind = HeadKind::ClsMiddle; },
             "  Middle     "},
            {"mean-pool", [](ModelConfig& m, SyntheticDatasetSpec&) { m.head_kind = HeadKind::MeanPool; },
             "  MeanPool   "},
        };
    }
    if (suite_id == "tokens") {
        return {
            {"base px, s=k (no overlap)",
             [](ModelConfig& m, SyntheticDatasetSpec&) { m.patch_stride = m.patch_kernel; },
             "  base px, s=k    "},
            {"base px, s=k/2 (overlap)",
             [](ModelConfig& m, SyntheticDatasetSpec&) { m.patch_stride = m.patch_kernel / 2; },
             "  base px, s=k/2  "},
            {"1.5x px, s=k/2",
             [](ModelConfig& m, SyntheticDatasetSpec& d) {
                 m.patch_stride = m.patch_kernel / 2;
                 m.image_h = m.image_w = m.image_h * 3 / 2;
                 d.extent = m.image_h;
             },
             "  1.5x px, s=k/2  "},
        };
    }
    fail("run_ablation: unknown suite '" + suite_id + "' (try paths|pe|head|tokens)");
}

std::string suite_header(const std::string& suite_id) {
    if (suite_id == "paths")
        return "Forward  Reverse  Shuffle  Mean/Gate         P        R       F1\n";
    if (suite_id == "pe") return "PE                  P        R       F1\n";
    if (suite_id == "head") return "Head               P        R       F1\n";
    return "Tokens                    P        R       F1\n";
}

}  // namespace

AblationResult run_ablation(const std::string& suite_id, const AblationBenchmark& bench) {
    AblationResult result;
    result.suite = suite_id;
    result.table_text = suite_header(suite_id);

    for (const auto& variant : suite_variants(suite_id)) {
        double psum = 0.0, rsum = 0.0, fsum = 0.0;
        for (i64 s = 0; s < bench.num_seeds; ++s) {
            ModelConfig model = bench.model;
            SyntheticDatasetSpec train_spec = bench.data;
            variant.apply(model, train_spec);

            // matched data and init seeds across variants
            train_spec.seed = mix64(bench.data.seed, static_cast<u64>(s), 0x747261696eULL);
            SyntheticDatasetSpec val_spec = train_spec;
            val_spec.seed = mix64(bench.data.seed, static_cast<u64>(s), 0x76616cULL);

            TrainConfig tc = bench.trainer;
            tc.seed = mix64(bench.trainer.seed, static_cast<u64>(s));
            tc.eval_each_epoch = false;

            SyntheticDataset train_data(train_spec), val_data(val_spec);
            auto trained = train(model, tc, train_data, nullptr);
            auto [rep, loss] = evaluate(val_data, trained.params, model, trained.stats,
                                        mix64(tc.seed, 0x6576616cULL), tc.threads);
            psum += rep.macro_precision;
            rsum += rep.macro_recall;
            fsum += rep.macro_f1;
        }
        AblationRow row;
        row.label = variant.label;
        row.precision = psum / static_cast<double>(bench.num_seeds);
        row.recall = rsum / static_cast<double>(bench.num_seeds);
        row.f1 = fsum / static_cast<double>(bench.num_seeds);
        result.rows.push_back(row);

        char line[192];
        std::snprintf(line, sizeof(line), "%s %7.2f  %7.2f  %7.2f\n", variant.row_prefix.c_str(),
                      100.0 * row.precision, 100.0 * row.recall, 100.0 * row.f1);
        result.table_text += line;
    }
    return result;
}

}  // namespace rsm
