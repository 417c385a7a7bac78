#pragma once

// Vision encoder, projector, and decoder language model, joined over one
// packed sequence: image patch embeddings first, text embeddings after.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vlm/image.hpp"
#include "vlm/masks.hpp"
#include "vlm/tensor.hpp"

namespace vlm {

struct VisionEncoderConfig {
    std::int64_t image_size = 0;
    std::int64_t patch_size = 0;
    std::int64_t hidden = 0;
    std::int64_t layers = 0;
    std::int64_t heads = 0;
    double mlp_ratio = 4.0;

    std::int64_t patches_per_side() const { return image_size / patch_size; }
    std::int64_t num_patches() const { return patches_per_side() * patches_per_side(); }
    std::int64_t patch_dim() const { return 3 * patch_size * patch_size; }
    std::int64_t intermediate() const;
    void validate() const;
};

struct DecoderConfig {
    std::int64_t hidden = 0;
    std::int64_t intermediate = 0;
    std::int64_t layers = 0;
    std::int64_t heads = 0;
    std::int64_t kv_heads = 0;
    std::int64_t vocab = 0;
    std::int64_t max_positions = 0;

    std::int64_t head_dim() const { return hidden / heads; }
    void validate() const;
};

struct VLMConfig {
    VisionEncoderConfig vision;
    DecoderConfig decoder;

    void validate() const;
    static VLMConfig desk();
    static VLMConfig full_scale();
};

enum class Component { Vision, Projector, Language };

struct LayerNormParams {
    Tensor gain;
    Tensor offset;
};

struct AttentionParams {
    Tensor wq, bq;  // [d, d], [d]
    Tensor wk, bk;  // [d, kv_heads*head_dim]
    Tensor wv, bv;
    Tensor wo, bo;  // [d, d], [d]
};

struct MlpParams {
    Tensor w1, b1;
    Tensor w2, b2;
};

struct BlockParams {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    MlpParams mlp;
};

struct VisionParams {
    Tensor patch_weight;  // [patch_dim, d_V]
    Tensor patch_bias;
    Tensor pos;  // [num_patches, d_V]
    std::vector<BlockParams> blocks;
    LayerNormParams final_norm;
};

struct ProjectorParams {
    Tensor w1, b1;  // d_V -> d_L
    Tensor w2, b2;  // d_L -> d_L
};

struct LanguageParams {
    Tensor token_embedding;  // [vocab, d_L]
    Tensor pos;              // [max_positions, d_L]
    std::vector<BlockParams> blocks;
    LayerNormParams final_norm;
    Tensor head;  // [d_L, vocab], no bias
};

struct VLMParams {
    VisionParams vision;
    ProjectorParams projector;
    LanguageParams language;

    // Fresh parameters: weights N(0, 0.02), positions N(0, 0.01), norms
    // identity, biases zero. Every leaf requires grad.
    static VLMParams init(const VLMConfig& cfg, RandomSource& rng);
};

// Visits every leaf in a fixed declaration order (the order init draws in,
// the order checkpoints serialize in).
using ParamVisitor = std::function<void(const std::string& name, Component component, Tensor& leaf)>;
void for_each_param(VLMParams& params, const ParamVisitor& visit);

struct ParamCounts {
    std::int64_t vision = 0;
    std::int64_t projector = 0;
    std::int64_t language = 0;
    std::int64_t total() const { return vision + projector + language; }
};

// Closed-form counts from the config (no tensors materialized).
ParamCounts count_params(const VLMConfig& cfg);

// Non-overlapping patches in row-major scan order, each flattened with the
// channel index slowest. [num_patches, patch_dim]
Tensor patchify(const Image& image, const VisionEncoderConfig& cfg);

// Patch embedding + positions + bidirectional encoder blocks + final norm.
// [num_patches, d_V]
Tensor encode_image(const Image& image, const VisionParams& params,
                    const VisionEncoderConfig& cfg);

// Rowwise two-layer GeLU MLP from d_V to d_L. [num_patches, d_L]
Tensor project(const Tensor& v, const ProjectorParams& params);

// Image rows first, then embedded text rows. pad_count marks how many
// trailing text_ids are padding (reflected in the layout, not the rows).
std::pair<Tensor, SegmentLayout> assemble_inputs(const Tensor& p,
                                                 const std::vector<std::int64_t>& text_ids,
                                                 const LanguageParams& params,
                                                 const DecoderConfig& cfg,
                                                 std::int64_t pad_count = 0);

// Positions added at input, pre-norm blocks with grouped-query attention,
// final norm, linear head. [len, vocab]
Tensor decoder_forward(const Tensor& input, const Tensor& mask_bias, const LanguageParams& params,
                       const DecoderConfig& cfg);

// Grouped-query attention: kv_heads key/value heads, each shared by
// heads/kv_heads query heads; kv_heads == heads is plain multi-head.
Tensor grouped_attention(const Tensor& x, const Tensor& mask_bias, const AttentionParams& params,
                         std::int64_t heads, std::int64_t kv_heads);

// Per-head post-softmax attention weights for the same computation.
std::vector<Tensor> attention_weights(const Tensor& x, const Tensor& mask_bias,
                                      const AttentionParams& params, std::int64_t heads,
                                      std::int64_t kv_heads);

// One pre-norm block: x + attn(ln1(x)), then + mlp(ln2(..)).
Tensor transformer_block(const Tensor& x, const Tensor& mask_bias, const BlockParams& params,
                         std::int64_t heads, std::int64_t kv_heads);

struct GenerateOptions {
    enum class Mode { Greedy, TopK };
    Mode mode = Mode::Greedy;
    std::int64_t k = 5;
    std::uint64_t seed = 0;
    std::int64_t eos_id = 2;
};

// Iterative decoding under the image-bidirectional/text-causal mask,
// stopping at eos or after max_new tokens. Returns only the new tokens.
std::vector<std::int64_t> generate(const Image& image, const std::vector<std::int64_t>& prompt_ids,
                                   const VLMParams& params, const VLMConfig& cfg,
                                   std::int64_t max_new, const GenerateOptions& options);

// Versioned container: header line, config as JSON, named little-endian
// blobs in declaration order, checksum trailer. Writes are atomic.
void save_checkpoint(const std::string& path, const VLMConfig& cfg, const VLMParams& params);
std::pair<VLMConfig, VLMParams> load_checkpoint(const std::string& path);

}  // namespace vlm
