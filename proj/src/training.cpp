#include "vlm/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "vlm/masks.hpp"

namespace vlm {

double StageConfig::lr_for(Component c) const {
    switch (c) {
        case Component::Vision: return lr_vision;
        case Component::Projector: return lr_projector;
        case Component::Language: return lr_language;
    }
    throw std::logic_error("lr_for: bad component");
}

void StageConfig::validate() const {
    if (stage < 0 || stage > 3) throw std::invalid_argument("StageConfig: stage out of range");
    if (stage == 0) {
        if (mask_kind != MaskKind::FullBidirectional) {
            throw std::invalid_argument("StageConfig: stage 0 requires the full bidirectional mask");
        }
        if (noise_rate != 0.2) {
            throw std::invalid_argument("StageConfig: stage 0 noises 20% of the text tokens");
        }
        if (lr_vision != 0.0 || lr_language != 0.0) {
            throw std::invalid_argument("StageConfig: stage 0 trains the projector only");
        }
    } else {
        if (mask_kind != MaskKind::ImageBidiTextCausal) {
            throw std::invalid_argument("StageConfig: stages 1-3 use the prefix mask");
        }
        if (noise_rate != 0.0) {
            throw std::invalid_argument("StageConfig: noising is a stage-0 device");
        }
    }
    if (lr_vision < 0 || lr_projector < 0 || lr_language < 0) {
        throw std::invalid_argument("StageConfig: negative learning rate");
    }
    if (epochs < 1) throw std::invalid_argument("StageConfig: epochs must be >= 1");
    if (micro_batch < 1 || global_batch < 1 || global_batch % micro_batch != 0) {
        throw std::invalid_argument("StageConfig: global_batch must be a multiple of micro_batch");
    }
    if (min_lr < 0) throw std::invalid_argument("StageConfig: negative min_lr");
    if (!(clip_norm > 0)) throw std::invalid_argument("StageConfig: clip_norm must be positive");
}

namespace {

StageConfig base_stage(int stage) {
    StageConfig cfg;
    cfg.stage = stage;
    switch (stage) {
        case 0:
            cfg.mask_kind = MaskKind::FullBidirectional;
            cfg.noise_rate = 0.2;
            cfg.lr_vision = 0.0;
            cfg.lr_projector = 1e-3;
            cfg.lr_language = 0.0;
            break;
        case 1:
            cfg.mask_kind = MaskKind::ImageBidiTextCausal;
            cfg.noise_rate = 0.0;
            cfg.lr_vision = 0.0;
            cfg.lr_projector = 1e-3;
            cfg.lr_language = 0.0;
            break;
        case 2:
            cfg.mask_kind = MaskKind::ImageBidiTextCausal;
            cfg.noise_rate = 0.0;
            cfg.lr_vision = 5e-6;
            cfg.lr_projector = 2e-3;
            cfg.lr_language = 2e-5;
            break;
        case 3:
            cfg.mask_kind = MaskKind::ImageBidiTextCausal;
            cfg.noise_rate = 0.0;
            cfg.lr_vision = 5e-6;
            cfg.lr_projector = 1e-4;
            cfg.lr_language = 2e-5;
            break;
        default:
            throw std::invalid_argument("stage_defaults: stage out of range");
    }
    return cfg;
}

}  // namespace

StageConfig stage_defaults(int stage) {
    StageConfig cfg = base_stage(stage);
    cfg.global_batch = 128;
    cfg.micro_batch = 16;
    cfg.clip_norm = 1.0;
    return cfg;
}

StageConfig desk_stage_defaults(int stage) {
    StageConfig cfg = base_stage(stage);
    cfg.global_batch = 32;
    cfg.micro_batch = 8;
    cfg.clip_norm = 1.0;
    // The published rates assume pretrained towers; a fresh random init at
    // desk scale needs to move much faster to memorize in a few hundred
    // steps.
    switch (stage) {
        case 0: cfg.lr_projector = 2e-3; break;
        case 1: cfg.lr_projector = 2e-3; break;
        case 2:
            cfg.lr_vision = 5e-4;
            cfg.lr_projector = 3e-3;
            cfg.lr_language = 5e-3;
            break;
        case 3:
            cfg.lr_vision = 2e-4;
            cfg.lr_projector = 5e-4;
            cfg.lr_language = 5e-4;
            break;
    }
    return cfg;
}

double ComponentLRs::of(Component c) const {
    switch (c) {
        case Component::Vision: return vision;
        case Component::Projector: return projector;
        case Component::Language: return language;
    }
    throw std::logic_error("ComponentLRs: bad component");
}

double cosine_lr(const ScheduleState& s, double peak) {
    if (s.total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    if (s.step < 0 || s.step > s.total_steps) {
        throw std::invalid_argument("cosine_lr: step outside [0, total_steps]");
    }
    if (s.step == 0) return peak;
    if (s.step == s.total_steps) return s.min_lr;
    const double frac = static_cast<double>(s.step) / static_cast<double>(s.total_steps);
    return s.min_lr + 0.5 * (peak - s.min_lr) * (1.0 + std::cos(M_PI * frac));
}

ComponentLRs schedule_lrs(const ScheduleState& s) {
    // a zero peak means frozen; it must not decay toward min_lr
    auto lr = [&](double peak) { return peak == 0.0 ? 0.0 : cosine_lr(s, peak); };
    return {lr(s.lr_vision_peak), lr(s.lr_projector_peak), lr(s.lr_language_peak)};
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> noise_input(
    const std::vector<std::int64_t>& text_ids, double noise_rate, std::uint64_t seed) {
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
        throw std::invalid_argument("noise_input: rate outside [0,1]");
    }
    const std::size_t n = text_ids.size();
    const std::size_t k = static_cast<std::size_t>(
        std::llround(noise_rate * static_cast<double>(n)));
    std::vector<std::int64_t> noised = text_ids;
    if (k > 0) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        RandomSource rng(seed);
        // partial Fisher-Yates: the first k entries are a uniform
        // without-replacement draw
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
            std::swap(order[i], order[j]);
        }
        for (std::size_t i = 0; i < k; ++i) noised[order[i]] = Vocabulary::kNoise;
    }
    return {std::move(noised), text_ids};
}

void apply_freezing(VLMParams& params, const StageConfig& stage) {
    for_each_param(params, [&](const std::string&, Component c, Tensor& leaf) {
        leaf.set_requires_grad(!stage.frozen(c));
        leaf.zero_grad();
    });
}

namespace {

std::uint64_t sample_noise_seed(std::uint64_t batch_seed, std::int64_t sample_index) {
    return RandomSource(batch_seed).fork(static_cast<std::uint64_t>(sample_index)).next_u64();
}

Tensor forward_impl(const Batch& batch, const VLMParams& params, const VLMConfig& cfg,
                    MaskKind mask_kind, double noise_rate) {
    if (batch.size() == 0) throw std::invalid_argument("forward: empty batch");
    Tensor total;
    for (std::int64_t s = 0; s < batch.size(); ++s) {
        const SegmentLayout& layout = batch.layouts[static_cast<std::size_t>(s)];
        const std::int64_t real_text = layout.segments[1].length;
        const std::int64_t pad_count = batch.text_width - real_text;

        std::vector<std::int64_t> text = batch.text_ids(s);
        if (noise_rate > 0.0) {
            std::vector<std::int64_t> real(text.begin(), text.begin() + real_text);
            auto [noised, original] = noise_input(
                real, noise_rate,
                sample_noise_seed(batch.seed, batch.sample_indices[static_cast<std::size_t>(s)]));
            (void)original;  // batch labels already carry the clean ids
            std::copy(noised.begin(), noised.end(), text.begin());
        }

        const Tensor v = encode_image(batch.images[static_cast<std::size_t>(s)], params.vision,
                                      cfg.vision);
        const Tensor p = project(v, params.projector);
        auto [input, built_layout] =
            assemble_inputs(p, text, params.language, cfg.decoder, pad_count);
        const Tensor bias = mask_bias_cached(built_layout, mask_kind);
        const Tensor logits = decoder_forward(input, bias, params.language, cfg.decoder);
        const Tensor ce =
            cross_entropy(logits, batch.labels[static_cast<std::size_t>(s)], kIgnoreIndex);
        total = total.defined() ? add(total, ce) : ce;
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace

Tensor forward_stage0(const Batch& batch, const VLMParams& params, const VLMConfig& cfg,
                      double noise_rate) {
    return forward_impl(batch, params, cfg, MaskKind::FullBidirectional, noise_rate);
}

Tensor forward_stage(const Batch& batch, const VLMParams& params, const VLMConfig& cfg) {
    return forward_impl(batch, params, cfg, MaskKind::ImageBidiTextCausal, 0.0);
}

Tensor forward_batch(const Batch& batch, const VLMParams& params, const VLMConfig& cfg,
                     const StageConfig& stage) {
    return stage.stage == 0 ? forward_stage0(batch, params, cfg, stage.noise_rate)
                            : forward_stage(batch, params, cfg);
}

double clip_grad_norm(VLMParams& params, double max_norm) {
    if (!(max_norm > 0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
    double sum_sq = 0.0;
    for_each_param(params, [&](const std::string& name, Component, Tensor& leaf) {
        if (!leaf.has_grad()) return;
        for (double g : leaf.grad()) {
            if (!std::isfinite(g)) {
                throw std::runtime_error("clip_grad_norm: non-finite gradient in " + name);
            }
            sum_sq += g * g;
        }
    });
    const double norm = std::sqrt(sum_sq);
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for_each_param(params, [&](const std::string&, Component, Tensor& leaf) {
        if (!leaf.has_grad()) return;
        for (double& g : leaf.grad_mut()) g *= scale;
    });
    return scale;
}

void adamw_step(VLMParams& params, OptimizerState& opt, const ComponentLRs& lrs,
                const AdamWConfig& acfg) {
    opt.step += 1;
    const double t = static_cast<double>(opt.step);
    const double bc1 = 1.0 - std::pow(acfg.beta1, t);
    const double bc2 = 1.0 - std::pow(acfg.beta2, t);
    for_each_param(params, [&](const std::string& name, Component c, Tensor& leaf) {
        const double lr = lrs.of(c);
        if (lr == 0.0) return;
        if (!leaf.has_grad()) {
            throw std::invalid_argument("adamw_step: missing gradient for " + name);
        }
        auto& m = opt.m[name];
        auto& v = opt.v[name];
        const std::size_t n = static_cast<std::size_t>(leaf.numel());
        if (m.empty()) m.assign(n, 0.0);
        if (v.empty()) v.assign(n, 0.0);
        auto grad = leaf.grad();
        auto data = leaf.raw_data();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            m[i] = acfg.beta1 * m[i] + (1.0 - acfg.beta1) * g;
            v[i] = acfg.beta2 * v[i] + (1.0 - acfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            const double theta = data[i];
            data[i] = theta - lr * acfg.weight_decay * theta -
                      lr * mhat / (std::sqrt(vhat) + acfg.eps);
        }
    });
}

double accumulate_and_step(const std::vector<Batch>& micro_batches, VLMParams& params,
                           OptimizerState& opt, const VLMConfig& cfg, const StageConfig& stage,
                           const ComponentLRs& lrs, const AdamWConfig& acfg) {
    if (micro_batches.empty()) throw std::invalid_argument("accumulate_and_step: no micro batches");
    for (const Batch& b : micro_batches) {
        if (b.num_patches != micro_batches.front().num_patches) {
            throw std::invalid_argument("accumulate_and_step: inconsistent batch shapes");
        }
    }
    for_each_param(params, [](const std::string&, Component, Tensor& leaf) { leaf.zero_grad(); });

    double loss_sum = 0.0;
    for (const Batch& micro : micro_batches) {
        Graph graph;
        const Tensor loss = forward_batch(micro, params, cfg, stage);
        graph.backward(loss);
        loss_sum += loss.value();
    }
    const double k = static_cast<double>(micro_batches.size());
    if (micro_batches.size() > 1) {
        const double inv = 1.0 / k;
        for_each_param(params, [&](const std::string&, Component, Tensor& leaf) {
            if (!leaf.has_grad()) return;
            for (double& g : leaf.grad_mut()) g *= inv;
        });
    }
    clip_grad_norm(params, stage.clip_norm);
    adamw_step(params, opt, lrs, acfg);
    return loss_sum / k;
}

StageResult run_stage(const std::vector<Sample>& dataset, const Vocabulary& vocab,
                      VLMParams& params, const VLMConfig& cfg, const StageConfig& stage,
                      std::uint64_t seed, const std::string& checkpoint_path,
                      const std::string& curve_csv_path) {
    stage.validate();
    if (dataset.empty()) throw std::invalid_argument("run_stage: empty dataset");

    apply_freezing(params, stage);
    OptimizerState opt;

    const std::int64_t n = static_cast<std::int64_t>(dataset.size());
    const std::int64_t steps_per_epoch = (n + stage.global_batch - 1) / stage.global_batch;
    const std::int64_t total_steps = stage.epochs * steps_per_epoch;

    StageResult result;
    const RandomSource base(seed);
    std::int64_t global_step = 0;
    for (std::int64_t epoch = 0; epoch < stage.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        // even salts shuffle, odd salts seed per-step noise
        RandomSource shuffle_rng = base.fork(static_cast<std::uint64_t>(2 * epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.next_below(i));
            std::swap(order[i - 1], order[j]);
        }

        for (std::int64_t start = 0; start < n; start += stage.global_batch) {
            const std::int64_t stop = std::min(n, start + stage.global_batch);
            const std::uint64_t step_seed =
                base.fork(static_cast<std::uint64_t>(2 * global_step + 1)).next_u64();

            std::vector<Batch> micros;
            for (std::int64_t ms = start; ms < stop; ms += stage.micro_batch) {
                const std::int64_t me = std::min(stop, ms + stage.micro_batch);
                std::vector<Sample> chunk;
                std::vector<std::int64_t> indices;
                for (std::int64_t i = ms; i < me; ++i) {
                    chunk.push_back(dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
                    indices.push_back(order[static_cast<std::size_t>(i)]);
                }
                micros.push_back(build_batch(chunk, stage.stage, vocab, cfg, step_seed, indices));
            }

            const ScheduleState ss{global_step, total_steps, stage.lr_vision,
                                   stage.lr_projector, stage.lr_language, stage.min_lr};
            const ComponentLRs lrs = schedule_lrs(ss);
            const double loss = accumulate_and_step(micros, params, opt, cfg, stage, lrs);
            result.curve.push_back({global_step, lrs.vision, lrs.projector, lrs.language, loss});
            ++global_step;
        }
    }

    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, cfg, params);
    if (!curve_csv_path.empty()) write_curve_csv(curve_csv_path, result.curve);
    return result;
}

void write_curve_csv(const std::string& path, const std::vector<StepRecord>& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_curve_csv: cannot write " + path);
    out << "step,lr_vision,lr_projector,lr_language,loss\n";
    char buf[256];
    for (const StepRecord& r : curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.step), r.lr_vision, r.lr_projector, r.lr_language,
                      r.loss);
        out << buf;
    }
    if (!out) throw std::runtime_error("write_curve_csv: write failed for " + path);
}

}  // namespace vlm
