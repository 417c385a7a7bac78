#pragma once

// The staged training pipeline: per-stage freezing and learning rates,
// stage-0 input noising, the two forward-pass recipes, AdamW with cosine
// decay, gradient accumulation and clipping, and the stage runner.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vlm/data.hpp"

namespace vlm {

struct StageConfig {
    int stage = 0;
    MaskKind mask_kind = MaskKind::FullBidirectional;
    double lr_vision = 0.0;
    double lr_projector = 1e-3;
    double lr_language = 0.0;
    double noise_rate = 0.2;
    std::int64_t epochs = 1;
    std::int64_t global_batch = 32;
    std::int64_t micro_batch = 8;
    double min_lr = 1e-8;
    double clip_norm = 1.0;

    double lr_for(Component c) const;
    // A zero learning rate is the freezing switch for that component.
    bool frozen(Component c) const { return lr_for(c) == 0.0; }
    void validate() const;
};

// Published per-stage recipe: batch 128, stage-0 noising 0.2, LR triples
// (vision, projector, language) of (0, 1e-3, 0) / (0, 1e-3, 0) /
// (5e-6, 2e-3, 2e-5) / (5e-6, 1e-4, 2e-5).
StageConfig stage_defaults(int stage);

// Desk-scale recipe: batch 32 with 4-way accumulation and learning rates
// raised enough to train the small model from a fresh random init.
StageConfig desk_stage_defaults(int stage);

struct ComponentLRs {
    double vision = 0.0;
    double projector = 0.0;
    double language = 0.0;

    double of(Component c) const;
};

struct ScheduleState {
    std::int64_t step = 0;
    std::int64_t total_steps = 1;
    double lr_vision_peak = 0.0;
    double lr_projector_peak = 0.0;
    double lr_language_peak = 0.0;
    double min_lr = 1e-8;
};

// min_lr + 0.5 (peak - min_lr) (1 + cos(pi step / total)). Endpoints are
// returned exactly: peak at step 0, min_lr at the final step. Throws when
// step is outside [0, total_steps].
double cosine_lr(const ScheduleState& s, double peak);
// Per-component schedule values; a zero peak stays exactly zero so the
// freezing switch survives the decay.
ComponentLRs schedule_lrs(const ScheduleState& s);

// Replaces exactly round(noise_rate * T) distinct positions (uniform,
// seeded, without replacement) with <noise>. Returns (noised ids, original
// ids). Never touches anything but the ids it is given, so callers decide
// the span (real text only, pads excluded).
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> noise_input(
    const std::vector<std::int64_t>& text_ids, double noise_rate, std::uint64_t seed);

// Sets requires_grad on every leaf from the stage's freezing pattern and
// drops stale gradient buffers.
void apply_freezing(VLMParams& params, const StageConfig& stage);

// Stage-0 pass: encode, project, noise the real text span, concatenate,
// fully bidirectional attention, mean cross-entropy per sample averaged
// over the batch. Noise streams are derived from (batch.seed,
// sample_index) so the loss is invariant to micro-batch regrouping.
Tensor forward_stage0(const Batch& batch, const VLMParams& params, const VLMConfig& cfg,
                      double noise_rate = 0.2);

// Stages 1-3: same pass with the image-bidirectional/text-causal mask and
// no noising. Stage-3 supervision arrives through the batch labels.
Tensor forward_stage(const Batch& batch, const VLMParams& params, const VLMConfig& cfg);

// Dispatch on stage.stage.
Tensor forward_batch(const Batch& batch, const VLMParams& params, const VLMConfig& cfg,
                     const StageConfig& stage);

// Global L2 over every populated gradient; scales them down to max_norm
// when above it. Returns the scale applied. Non-finite gradients are a
// hard error.
double clip_grad_norm(VLMParams& params, double max_norm);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct OptimizerState {
    std::int64_t step = 0;
    // Keyed by leaf name; frozen leaves never get an entry.
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// Decoupled weight decay (both the decay and the adaptive term read the
// pre-update value), bias-corrected moments. Leaves of a zero-lr component
// are untouched; a trainable leaf without a gradient is an error.
void adamw_step(VLMParams& params, OptimizerState& opt, const ComponentLRs& lrs,
                const AdamWConfig& acfg = {});

// Backward over each micro-batch, gradients averaged, clipped, one
// optimizer step. Returns the mean of the micro losses.
double accumulate_and_step(const std::vector<Batch>& micro_batches, VLMParams& params,
                           OptimizerState& opt, const VLMConfig& cfg, const StageConfig& stage,
                           const ComponentLRs& lrs, const AdamWConfig& acfg = {});

struct StepRecord {
    std::int64_t step = 0;
    double lr_vision = 0.0;
    double lr_projector = 0.0;
    double lr_language = 0.0;
    double loss = 0.0;
};

struct StageResult {
    std::vector<StepRecord> curve;  // one record per optimizer step
};

// epochs x ceil(N / global_batch) steps with a seeded shuffle per epoch
// and per-stage cosine decay. Writes the final checkpoint and the curve
// CSV when the paths are nonempty.
StageResult run_stage(const std::vector<Sample>& dataset, const Vocabulary& vocab,
                      VLMParams& params, const VLMConfig& cfg, const StageConfig& stage,
                      std::uint64_t seed, const std::string& checkpoint_path = "",
                      const std::string& curve_csv_path = "");

// step,lr_vision,lr_projector,lr_language,loss with full double precision.
void write_curve_csv(const std::string& path, const std::vector<StepRecord>& curve);

}  // namespace vlm
