#include "vlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace vlm {

namespace {

using nlohmann::json;

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

}  // namespace

std::int64_t VisionEncoderConfig::intermediate() const {
    return std::llround(static_cast<double>(hidden) * mlp_ratio);
}

void VisionEncoderConfig::validate() const {
    require(image_size > 0 && patch_size > 0, "vision config: sizes must be positive");
    require(image_size % patch_size == 0, "vision config: image_size not divisible by patch_size");
    require(hidden > 0 && layers > 0 && heads > 0, "vision config: dims must be positive");
    require(hidden % heads == 0, "vision config: hidden not divisible by heads");
    require(mlp_ratio > 0.0 && intermediate() > 0, "vision config: bad mlp_ratio");
}

void DecoderConfig::validate() const {
    require(hidden > 0 && intermediate > 0 && layers > 0, "decoder config: dims must be positive");
    require(heads > 0 && kv_heads > 0, "decoder config: heads must be positive");
    require(hidden % heads == 0, "decoder config: hidden not divisible by heads");
    require(heads % kv_heads == 0, "decoder config: heads not divisible by kv_heads");
    require(vocab >= 7, "decoder config: vocab smaller than the reserved token set");
    require(max_positions > 0, "decoder config: max_positions must be positive");
}

void VLMConfig::validate() const {
    vision.validate();
    decoder.validate();
    require(vision.num_patches() < decoder.max_positions,
            "config: image patches leave no room for text");
}

VLMConfig VLMConfig::desk() {
    VLMConfig cfg;
    cfg.vision = {32, 8, 64, 2, 4, 4.0};
    cfg.decoder = {64, 256, 2, 4, 2, 512, 128};
    return cfg;
}

VLMConfig VLMConfig::full_scale() {
    VLMConfig cfg;
    cfg.vision = {224, 14, 1152, 27, 16, 4304.0 / 1152.0};
    cfg.decoder = {896, 4864, 24, 14, 2, 151936, 32768};
    return cfg;
}

namespace {

// Builds the full parameter tree. When rng is null every leaf is zeros
// (checkpoint loading overwrites them); otherwise the init distributions
// apply, drawn in declaration order.
VLMParams make_params(const VLMConfig& cfg, RandomSource* rng) {
    cfg.validate();
    auto weight = [&](std::vector<std::int64_t> shape) {
        return rng ? Tensor::randn(shape, 0.02, *rng, true) : Tensor::zeros(shape, true);
    };
    auto position = [&](std::vector<std::int64_t> shape) {
        return rng ? Tensor::randn(shape, 0.01, *rng, true) : Tensor::zeros(shape, true);
    };
    auto bias = [&](std::int64_t n) { return Tensor::zeros({n}, true); };
    auto norm = [&](std::int64_t n) {
        return LayerNormParams{rng ? Tensor::full({n}, 1.0, true) : Tensor::zeros({n}, true),
                               Tensor::zeros({n}, true)};
    };
    auto block = [&](std::int64_t d, std::int64_t kv_dim, std::int64_t inter) {
        BlockParams b;
        b.ln1 = norm(d);
        b.attn.wq = weight({d, d});
        b.attn.bq = bias(d);
        b.attn.wk = weight({d, kv_dim});
        b.attn.bk = bias(kv_dim);
        b.attn.wv = weight({d, kv_dim});
        b.attn.bv = bias(kv_dim);
        b.attn.wo = weight({d, d});
        b.attn.bo = bias(d);
        b.ln2 = norm(d);
        b.mlp.w1 = weight({d, inter});
        b.mlp.b1 = bias(inter);
        b.mlp.w2 = weight({inter, d});
        b.mlp.b2 = bias(d);
        return b;
    };

    VLMParams params;
    const auto& vc = cfg.vision;
    params.vision.patch_weight = weight({vc.patch_dim(), vc.hidden});
    params.vision.patch_bias = bias(vc.hidden);
    params.vision.pos = position({vc.num_patches(), vc.hidden});
    for (std::int64_t i = 0; i < vc.layers; ++i) {
        params.vision.blocks.push_back(block(vc.hidden, vc.hidden, vc.intermediate()));
    }
    params.vision.final_norm = norm(vc.hidden);

    params.projector.w1 = weight({vc.hidden, cfg.decoder.hidden});
    params.projector.b1 = bias(cfg.decoder.hidden);
    params.projector.w2 = weight({cfg.decoder.hidden, cfg.decoder.hidden});
    params.projector.b2 = bias(cfg.decoder.hidden);

    const auto& dc = cfg.decoder;
    params.language.token_embedding = weight({dc.vocab, dc.hidden});
    params.language.pos = position({dc.max_positions, dc.hidden});
    for (std::int64_t i = 0; i < dc.layers; ++i) {
        params.language.blocks.push_back(
            block(dc.hidden, dc.kv_heads * dc.head_dim(), dc.intermediate));
    }
    params.language.final_norm = norm(dc.hidden);
    params.language.head = weight({dc.hidden, dc.vocab});
    return params;
}

void visit_block(BlockParams& b, const std::string& prefix, Component comp,
                 const ParamVisitor& visit) {
    visit(prefix + ".ln1.gain", comp, b.ln1.gain);
    visit(prefix + ".ln1.offset", comp, b.ln1.offset);
    visit(prefix + ".attn.wq", comp, b.attn.wq);
    visit(prefix + ".attn.bq", comp, b.attn.bq);
    visit(prefix + ".attn.wk", comp, b.attn.wk);
    visit(prefix + ".attn.bk", comp, b.attn.bk);
    visit(prefix + ".attn.wv", comp, b.attn.wv);
    visit(prefix + ".attn.bv", comp, b.attn.bv);
    visit(prefix + ".attn.wo", comp, b.attn.wo);
    visit(prefix + ".attn.bo", comp, b.attn.bo);
    visit(prefix + ".ln2.gain", comp, b.ln2.gain);
    visit(prefix + ".ln2.offset", comp, b.ln2.offset);
    visit(prefix + ".mlp.w1", comp, b.mlp.w1);
    visit(prefix + ".mlp.b1", comp, b.mlp.b1);
    visit(prefix + ".mlp.w2", comp, b.mlp.w2);
    visit(prefix + ".mlp.b2", comp, b.mlp.b2);
}

}  // namespace

VLMParams VLMParams::init(const VLMConfig& cfg, RandomSource& rng) {
    return make_params(cfg, &rng);
}

void for_each_param(VLMParams& params, const ParamVisitor& visit) {
    visit("vision.patch_weight", Component::Vision, params.vision.patch_weight);
    visit("vision.patch_bias", Component::Vision, params.vision.patch_bias);
    visit("vision.pos", Component::Vision, params.vision.pos);
    for (std::size_t i = 0; i < params.vision.blocks.size(); ++i) {
        visit_block(params.vision.blocks[i], "vision.block" + std::to_string(i),
                    Component::Vision, visit);
    }
    visit("vision.final_norm.gain", Component::Vision, params.vision.final_norm.gain);
    visit("vision.final_norm.offset", Component::Vision, params.vision.final_norm.offset);

    visit("projector.w1", Component::Projector, params.projector.w1);
    visit("projector.b1", Component::Projector, params.projector.b1);
    visit("projector.w2", Component::Projector, params.projector.w2);
    visit("projector.b2", Component::Projector, params.projector.b2);

    visit("language.token_embedding", Component::Language, params.language.token_embedding);
    visit("language.pos", Component::Language, params.language.pos);
    for (std::size_t i = 0; i < params.language.blocks.size(); ++i) {
        visit_block(params.language.blocks[i], "language.block" + std::to_string(i),
                    Component::Language, visit);
    }
    visit("language.final_norm.gain", Component::Language, params.language.final_norm.gain);
    visit("language.final_norm.offset", Component::Language, params.language.final_norm.offset);
    visit("language.head", Component::Language, params.language.head);
}

ParamCounts count_params(const VLMConfig& cfg) {
    cfg.validate();
    auto norm_count = [](std::int64_t d) { return 2 * d; };
    auto block_count = [&](std::int64_t d, std::int64_t kv_dim, std::int64_t inter) {
        const std::int64_t attn = 2 * (d * d + d) + 2 * (d * kv_dim + kv_dim);
        const std::int64_t mlp = d * inter + inter + inter * d + d;
        return 2 * norm_count(d) + attn + mlp;
    };

    ParamCounts counts;
    const auto& vc = cfg.vision;
    counts.vision = vc.patch_dim() * vc.hidden + vc.hidden + vc.num_patches() * vc.hidden +
                    vc.layers * block_count(vc.hidden, vc.hidden, vc.intermediate()) +
                    norm_count(vc.hidden);

    counts.projector = vc.hidden * cfg.decoder.hidden + cfg.decoder.hidden +
                       cfg.decoder.hidden * cfg.decoder.hidden + cfg.decoder.hidden;

    const auto& dc = cfg.decoder;
    counts.language = dc.vocab * dc.hidden + dc.max_positions * dc.hidden +
                      dc.layers * block_count(dc.hidden, dc.kv_heads * dc.head_dim(),
                                              dc.intermediate) +
                      norm_count(dc.hidden) + dc.hidden * dc.vocab;
    return counts;
}

Tensor patchify(const Image& image, const VisionEncoderConfig& cfg) {
    cfg.validate();
    if (image.width != cfg.image_size || image.height != cfg.image_size) {
        throw std::invalid_argument("patchify: image does not match configured size");
    }
    const std::int64_t side = cfg.patches_per_side();
    const std::int64_t ps = cfg.patch_size;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(cfg.num_patches() * cfg.patch_dim()));
    for (std::int64_t py = 0; py < side; ++py) {
        for (std::int64_t px = 0; px < side; ++px) {
            for (std::int64_t c = 0; c < 3; ++c) {
                for (std::int64_t y = 0; y < ps; ++y) {
                    for (std::int64_t x = 0; x < ps; ++x) {
                        out.push_back(image.at(c, py * ps + y, px * ps + x));
                    }
                }
            }
        }
    }
    return Tensor::from_data({cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

namespace {

void check_heads(std::int64_t d, std::int64_t heads, std::int64_t kv_heads) {
    if (heads <= 0 || kv_heads <= 0 || d % heads != 0 || heads % kv_heads != 0) {
        throw std::invalid_argument("grouped_attention: bad head arrangement");
    }
}

Tensor head_probs(const Tensor& q, const Tensor& k, const Tensor& mask_bias, std::int64_t h,
                  std::int64_t g, std::int64_t head_dim) {
    Tensor qh = slice_cols(q, h * head_dim, (h + 1) * head_dim);
    Tensor kh = slice_cols(k, g * head_dim, (g + 1) * head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)),
                          1.0 / std::sqrt(static_cast<double>(head_dim)));
    return softmax_rows(scores, mask_bias);
}

}  // namespace

Tensor grouped_attention(const Tensor& x, const Tensor& mask_bias, const AttentionParams& p,
                         std::int64_t heads, std::int64_t kv_heads) {
    const std::int64_t d = x.dim(1);
    check_heads(d, heads, kv_heads);
    const std::int64_t head_dim = d / heads;
    const std::int64_t group = heads / kv_heads;
    Tensor q = add_row_bias(matmul(x, p.wq), p.bq);
    Tensor k = add_row_bias(matmul(x, p.wk), p.bk);
    Tensor v = add_row_bias(matmul(x, p.wv), p.bv);
    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t g = h / group;
        Tensor probs = head_probs(q, k, mask_bias, h, g, head_dim);
        Tensor vh = slice_cols(v, g * head_dim, (g + 1) * head_dim);
        contexts.push_back(matmul(probs, vh));
    }
    return add_row_bias(matmul(concat_cols(contexts), p.wo), p.bo);
}

std::vector<Tensor> attention_weights(const Tensor& x, const Tensor& mask_bias,
                                      const AttentionParams& p, std::int64_t heads,
                                      std::int64_t kv_heads) {
    const std::int64_t d = x.dim(1);
    check_heads(d, heads, kv_heads);
    const std::int64_t head_dim = d / heads;
    const std::int64_t group = heads / kv_heads;
    Tensor q = add_row_bias(matmul(x, p.wq), p.bq);
    Tensor k = add_row_bias(matmul(x, p.wk), p.bk);
    std::vector<Tensor> all;
    all.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        all.push_back(head_probs(q, k, mask_bias, h, h / group, head_dim));
    }
    return all;
}

Tensor transformer_block(const Tensor& x, const Tensor& mask_bias, const BlockParams& params,
                         std::int64_t heads, std::int64_t kv_heads) {
    Tensor h = add(x, grouped_attention(layer_norm(x, params.ln1.gain, params.ln1.offset),
                                        mask_bias, params.attn, heads, kv_heads));
    Tensor inner = add_row_bias(matmul(layer_norm(h, params.ln2.gain, params.ln2.offset),
                                       params.mlp.w1),
                                params.mlp.b1);
    Tensor out = add_row_bias(matmul(gelu(inner), params.mlp.w2), params.mlp.b2);
    return add(h, out);
}

Tensor encode_image(const Image& image, const VisionParams& params,
                    const VisionEncoderConfig& cfg) {
    Tensor patches = patchify(image, cfg);
    Tensor x = add(add_row_bias(matmul(patches, params.patch_weight), params.patch_bias),
                   params.pos);
    const SegmentLayout layout = SegmentLayout::of({{SegmentKind::Image, cfg.num_patches()}});
    Tensor bias = mask_bias_cached(layout, MaskKind::FullBidirectional);
    for (const BlockParams& block : params.blocks) {
        x = transformer_block(x, bias, block, cfg.heads, cfg.heads);
    }
    return layer_norm(x, params.final_norm.gain, params.final_norm.offset);
}

Tensor project(const Tensor& v, const ProjectorParams& params) {
    if (v.dim(1) != params.w1.dim(0)) throw std::invalid_argument("project: width mismatch");
    Tensor h = gelu(add_row_bias(matmul(v, params.w1), params.b1));
    return add_row_bias(matmul(h, params.w2), params.b2);
}

std::pair<Tensor, SegmentLayout> assemble_inputs(const Tensor& p,
                                                 const std::vector<std::int64_t>& text_ids,
                                                 const LanguageParams& params,
                                                 const DecoderConfig& cfg,
                                                 std::int64_t pad_count) {
    if (text_ids.empty()) throw std::invalid_argument("assemble_inputs: empty text");
    const std::int64_t t = static_cast<std::int64_t>(text_ids.size());
    if (pad_count < 0 || pad_count >= t) {
        throw std::invalid_argument("assemble_inputs: bad pad count");
    }
    const std::int64_t num_patches = p.dim(0);
    if (num_patches + t > cfg.max_positions) {
        throw std::invalid_argument("assemble_inputs: sequence exceeds max_positions");
    }
    Tensor text = embedding_rows(params.token_embedding, text_ids);
    Tensor input = concat_rows({p, text});
    std::vector<Segment> segments = {{SegmentKind::Image, num_patches},
                                     {SegmentKind::Text, t - pad_count}};
    if (pad_count > 0) segments.push_back({SegmentKind::Pad, pad_count});
    return {input, SegmentLayout::of(std::move(segments))};
}

Tensor decoder_forward(const Tensor& input, const Tensor& mask_bias, const LanguageParams& params,
                       const DecoderConfig& cfg) {
    const std::int64_t len = input.dim(0);
    if (mask_bias.ndim() != 2 || mask_bias.dim(0) != len || mask_bias.dim(1) != len) {
        throw std::invalid_argument("decoder_forward: mask does not match sequence length");
    }
    if (len > cfg.max_positions) {
        throw std::invalid_argument("decoder_forward: sequence exceeds max_positions");
    }
    Tensor x = add(input, slice_rows(params.pos, 0, len));
    for (const BlockParams& block : params.blocks) {
        x = transformer_block(x, mask_bias, block, cfg.heads, cfg.kv_heads);
    }
    x = layer_norm(x, params.final_norm.gain, params.final_norm.offset);
    return matmul(x, params.head);
}

std::vector<std::int64_t> generate(const Image& image, const std::vector<std::int64_t>& prompt_ids,
                                   const VLMParams& params, const VLMConfig& cfg,
                                   std::int64_t max_new, const GenerateOptions& options) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    if (prompt_ids.empty()) throw std::invalid_argument("generate: empty prompt");
    const std::int64_t num_patches = cfg.vision.num_patches();
    if (num_patches + static_cast<std::int64_t>(prompt_ids.size()) + max_new >
        cfg.decoder.max_positions) {
        throw std::invalid_argument("generate: prompt plus budget exceeds max_positions");
    }

    Tensor p = project(encode_image(image, params.vision, cfg.vision), params.projector);
    RandomSource rng(options.seed);
    std::vector<std::int64_t> ids = prompt_ids;
    std::vector<std::int64_t> produced;
    for (std::int64_t step = 0; step < max_new; ++step) {
        auto [input, layout] = assemble_inputs(p, ids, params.language, cfg.decoder);
        Tensor bias = mask_bias_cached(layout, MaskKind::ImageBidiTextCausal);
        Tensor logits = decoder_forward(input, bias, params.language, cfg.decoder);
        const std::int64_t last = logits.dim(0) - 1;

        std::int64_t next = 0;
        if (options.mode == GenerateOptions::Mode::Greedy) {
            double best = logits.at(last, 0);
            for (std::int64_t j = 1; j < cfg.decoder.vocab; ++j) {
                if (logits.at(last, j) > best) {
                    best = logits.at(last, j);
                    next = j;
                }
            }
        } else {
            if (options.k < 1) throw std::invalid_argument("generate: k must be >= 1");
            const std::int64_t k = std::min(options.k, cfg.decoder.vocab);
            // Top k by logit, ties to the lower id.
            std::vector<std::int64_t> order(static_cast<std::size_t>(cfg.decoder.vocab));
            for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<std::int64_t>(j);
            std::partial_sort(order.begin(), order.begin() + k, order.end(),
                              [&](std::int64_t a, std::int64_t b) {
                                  const double la = logits.at(last, a), lb = logits.at(last, b);
                                  return la > lb || (la == lb && a < b);
                              });
            double mx = logits.at(last, order[0]);
            std::vector<double> probs(static_cast<std::size_t>(k));
            double sum = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                probs[static_cast<std::size_t>(j)] = std::exp(logits.at(last, order[static_cast<std::size_t>(j)]) - mx);
                sum += probs[static_cast<std::size_t>(j)];
            }
            double u = rng.next_uniform() * sum;
            next = order[static_cast<std::size_t>(k - 1)];
            double acc = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                acc += probs[static_cast<std::size_t>(j)];
                if (u < acc) {
                    next = order[static_cast<std::size_t>(j)];
                    break;
                }
            }
        }

        produced.push_back(next);
        ids.push_back(next);
        if (next == options.eos_id) break;
    }
    return produced;
}

// ---- checkpoint I/O ----

namespace {

json vision_to_json(const VisionEncoderConfig& c) {
    return json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
                {"hidden", c.hidden},         {"layers", c.layers},
                {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio}};
}

json decoder_to_json(const DecoderConfig& c) {
    return json{{"hidden", c.hidden},       {"intermediate", c.intermediate},
                {"layers", c.layers},       {"heads", c.heads},
                {"kv_heads", c.kv_heads},   {"vocab", c.vocab},
                {"max_positions", c.max_positions}};
}

VLMConfig config_from_json(const json& j) {
    VLMConfig cfg;
    const json& v = j.at("vision");
    cfg.vision.image_size = v.at("image_size").get<std::int64_t>();
    cfg.vision.patch_size = v.at("patch_size").get<std::int64_t>();
    cfg.vision.hidden = v.at("hidden").get<std::int64_t>();
    cfg.vision.layers = v.at("layers").get<std::int64_t>();
    cfg.vision.heads = v.at("heads").get<std::int64_t>();
    cfg.vision.mlp_ratio = v.at("mlp_ratio").get<double>();
    const json& d = j.at("decoder");
    cfg.decoder.hidden = d.at("hidden").get<std::int64_t>();
    cfg.decoder.intermediate = d.at("intermediate").get<std::int64_t>();
    cfg.decoder.layers = d.at("layers").get<std::int64_t>();
    cfg.decoder.heads = d.at("heads").get<std::int64_t>();
    cfg.decoder.kv_heads = d.at("kv_heads").get<std::int64_t>();
    cfg.decoder.vocab = d.at("vocab").get<std::int64_t>();
    cfg.decoder.max_positions = d.at("max_positions").get<std::int64_t>();
    return cfg;
}

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_update(std::uint64_t& h, const unsigned char* data, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= kFnvPrime;
    }
}

void write_doubles_le(std::ofstream& out, std::span<const double> values, std::uint64_t& checksum) {
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &values[i], 8);
        for (int b = 0; b < 8; ++b) {
            bytes[i * 8 + static_cast<std::size_t>(b)] =
                static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        }
    }
    fnv_update(checksum, bytes.data(), bytes.size());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

void read_doubles_le(std::ifstream& in, std::span<double> values, std::uint64_t& checksum) {
    std::vector<unsigned char> bytes(values.size() * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("checkpoint: truncated parameter blob");
    fnv_update(checksum, bytes.data(), bytes.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)])
                    << (8 * b);
        }
        double v;
        std::memcpy(&v, &bits, 8);
        if (!std::isfinite(v)) throw std::runtime_error("checkpoint: non-finite parameter value");
        values[i] = v;
    }
}

std::string checksum_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

void save_checkpoint(const std::string& path, const VLMConfig& cfg, const VLMParams& params) {
    cfg.validate();
    const std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp);

    json header{{"vision", vision_to_json(cfg.vision)}, {"decoder", decoder_to_json(cfg.decoder)}};
    out << "vlmckpt 1\n" << header.dump() << "\n";

    std::uint64_t checksum = kFnvOffset;
    for_each_param(const_cast<VLMParams&>(params),
                   [&](const std::string& name, Component, Tensor& leaf) {
                       out << "param " << name << ' ' << leaf.numel() << "\n";
                       write_doubles_le(out, leaf.data(), checksum);
                       out << "\n";
                   });
    out << "checksum " << checksum_hex(checksum) << "\n";
    out.close();
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("save_checkpoint: rename failed for " + path);
    }
}

std::pair<VLMConfig, VLMParams> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

    std::string line;
    if (!std::getline(in, line) || line != "vlmckpt 1") {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    if (!std::getline(in, line)) throw std::runtime_error("load_checkpoint: missing config");
    VLMConfig cfg;
    try {
        cfg = config_from_json(json::parse(line));
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("load_checkpoint: bad config: ") + e.what());
    }
    VLMParams params = make_params(cfg, nullptr);

    std::uint64_t checksum = kFnvOffset;
    for_each_param(params, [&](const std::string& name, Component, Tensor& leaf) {
        std::string header;
        if (!std::getline(in, header)) throw std::runtime_error("load_checkpoint: truncated file");
        std::istringstream fields(header);
        std::string tag, got_name;
        std::int64_t numel = -1;
        fields >> tag >> got_name >> numel;
        if (tag != "param" || got_name != name || numel != leaf.numel()) {
            throw std::runtime_error("load_checkpoint: expected blob '" + name + "', found '" +
                                     header + "'");
        }
        read_doubles_le(in, leaf.raw_data(), checksum);
        std::getline(in, header);  // blob terminator
    });
    if (!std::getline(in, line) || line.rfind("checksum ", 0) != 0) {
        throw std::runtime_error("load_checkpoint: missing checksum");
    }
    if (line.substr(9) != checksum_hex(checksum)) {
        throw std::runtime_error("load_checkpoint: checksum mismatch");
    }
    return {cfg, std::move(params)};
}

}  // namespace vlm
