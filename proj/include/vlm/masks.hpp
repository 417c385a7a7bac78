#pragma once

// Attention-permission matrices. A SegmentLayout describes how a packed
// sequence divides into image, text, and pad spans; build_mask turns a
// (layout, kind) pair into the boolean matrix that gates attention, and
// mask_to_bias lowers that to the additive form the softmax consumes.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vlm/tensor.hpp"

namespace vlm {

enum class SegmentKind { Image, Text, Pad };

struct Segment {
    SegmentKind kind;
    std::int64_t length;
};

struct SegmentLayout {
    std::vector<Segment> segments;
    std::int64_t total_len = 0;

    static SegmentLayout of(std::vector<Segment> segments);

    // Segment kind / segment index for an absolute token position.
    SegmentKind kind_at(std::int64_t pos) const;
    std::int64_t block_at(std::int64_t pos) const;
    std::int64_t image_segment_count() const;

    bool operator==(const SegmentLayout& other) const;
    // Stable text form, e.g. "I16,T8,P4"; doubles as a cache key.
    std::string key() const;
};

enum class MaskKind {
    FullBidirectional,
    ImageBidiTextCausal,
    CausalBaseline,
    InterleavedA,
    InterleavedB,
};

const char* mask_kind_name(MaskKind kind);
// Throws on an unknown name.
MaskKind mask_kind_from_name(const std::string& name);

struct MaskMatrix {
    std::int64_t n = 0;
    std::vector<std::uint8_t> allow;  // row-major n*n

    bool at(std::int64_t i, std::int64_t j) const {
        return allow[static_cast<std::size_t>(i * n + j)] != 0;
    }
};

// allow[i][j]: may token i attend token j.
//   FullBidirectional    all non-pad pairs
//   ImageBidiTextCausal  image tokens form a clique and never see text;
//                        text tokens see all image tokens plus text j <= i
//   CausalBaseline       j <= i
//   InterleavedA         img(j) or j <= i
//   InterleavedB         earlier segment, or same segment with (img(j) or j <= i)
// Pad rows keep only their diagonal entry; pad columns are never attended.
MaskMatrix build_mask(const SegmentLayout& layout, MaskKind kind);

// 0 where allowed, kMaskBias where forbidden. Never requires grad.
Tensor mask_to_bias(const MaskMatrix& mask);

// Cached bias for a (layout, kind) pair; one shared tensor per key.
Tensor mask_bias_cached(const SegmentLayout& layout, MaskKind kind);

// Information-flow closure: every index reachable from src along allow
// edges (including src itself).
std::set<std::int64_t> reachability(const MaskMatrix& mask, std::int64_t src);

struct MaskViolation {
    std::int64_t i;
    std::int64_t j;
    bool expected;
};

// Re-derives the rule for (layout, kind) and returns the first cell that
// disagrees, scanning row-major; nullopt means the mask is exactly right.
std::optional<MaskViolation> validate_mask(const MaskMatrix& mask, const SegmentLayout& layout,
                                           MaskKind kind);

}  // namespace vlm
