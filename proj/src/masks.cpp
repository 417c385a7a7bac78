#include "vlm/masks.hpp"

#include <map>
#include <stdexcept>

namespace vlm {

SegmentLayout SegmentLayout::of(std::vector<Segment> segments) {
    SegmentLayout layout;
    layout.segments = std::move(segments);
    for (const Segment& s : layout.segments) {
        if (s.length <= 0) throw std::invalid_argument("SegmentLayout: lengths must be positive");
        layout.total_len += s.length;
    }
    return layout;
}

SegmentKind SegmentLayout::kind_at(std::int64_t pos) const {
    std::int64_t offset = 0;
    for (const Segment& s : segments) {
        if (pos < offset + s.length) return s.kind;
        offset += s.length;
    }
    throw std::invalid_argument("SegmentLayout: position out of range");
}

std::int64_t SegmentLayout::block_at(std::int64_t pos) const {
    std::int64_t offset = 0;
    for (std::size_t b = 0; b < segments.size(); ++b) {
        if (pos < offset + segments[b].length) return static_cast<std::int64_t>(b);
        offset += segments[b].length;
    }
    throw std::invalid_argument("SegmentLayout: position out of range");
}

std::int64_t SegmentLayout::image_segment_count() const {
    std::int64_t count = 0;
    for (const Segment& s : segments) {
        if (s.kind == SegmentKind::Image) ++count;
    }
    return count;
}

bool SegmentLayout::operator==(const SegmentLayout& other) const {
    if (total_len != other.total_len || segments.size() != other.segments.size()) return false;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (segments[i].kind != other.segments[i].kind ||
            segments[i].length != other.segments[i].length) {
            return false;
        }
    }
    return true;
}

std::string SegmentLayout::key() const {
    std::string out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (i) out += ',';
        switch (segments[i].kind) {
            case SegmentKind::Image: out += 'I'; break;
            case SegmentKind::Text: out += 'T'; break;
            case SegmentKind::Pad: out += 'P'; break;
        }
        out += std::to_string(segments[i].length);
    }
    return out;
}

const char* mask_kind_name(MaskKind kind) {
    switch (kind) {
        case MaskKind::FullBidirectional: return "full_bidirectional";
        case MaskKind::ImageBidiTextCausal: return "image_bidi_text_causal";
        case MaskKind::CausalBaseline: return "causal_baseline";
        case MaskKind::InterleavedA: return "interleaved_a";
        case MaskKind::InterleavedB: return "interleaved_b";
    }
    throw std::invalid_argument("mask_kind_name: unknown kind");
}

MaskKind mask_kind_from_name(const std::string& name) {
    for (MaskKind k : {MaskKind::FullBidirectional, MaskKind::ImageBidiTextCausal,
                       MaskKind::CausalBaseline, MaskKind::InterleavedA, MaskKind::InterleavedB}) {
        if (name == mask_kind_name(k)) return k;
    }
    throw std::invalid_argument("mask_kind_from_name: unknown kind '" + name + "'");
}

namespace {

// The rule for non-pad cells, before the pad overrides.
bool allow_rule(const SegmentLayout& layout, MaskKind kind, std::int64_t i, std::int64_t j,
                SegmentKind ki, SegmentKind kj) {
    const bool img_j = kj == SegmentKind::Image;
    const bool img_i = ki == SegmentKind::Image;
    const bool txt_i = ki == SegmentKind::Text;
    switch (kind) {
        case MaskKind::FullBidirectional:
            return true;
        case MaskKind::ImageBidiTextCausal:
            return (img_i && img_j) || (txt_i && (img_j || j <= i));
        case MaskKind::CausalBaseline:
            return j <= i;
        case MaskKind::InterleavedA:
            return img_j || j <= i;
        case MaskKind::InterleavedB: {
            const std::int64_t bi = layout.block_at(i), bj = layout.block_at(j);
            return bj < bi || (bj == bi && (img_j || j <= i));
        }
    }
    throw std::invalid_argument("build_mask: unknown kind");
}

bool expected_cell(const SegmentLayout& layout, MaskKind kind, std::int64_t i, std::int64_t j) {
    const SegmentKind ki = layout.kind_at(i);
    const SegmentKind kj = layout.kind_at(j);
    if (ki == SegmentKind::Pad) return i == j;
    if (kj == SegmentKind::Pad) return false;
    return allow_rule(layout, kind, i, j, ki, kj);
}

void check_layout_for_kind(const SegmentLayout& layout, MaskKind kind) {
    if (layout.segments.empty()) throw std::invalid_argument("build_mask: empty layout");
    const bool interleaved = kind == MaskKind::InterleavedA || kind == MaskKind::InterleavedB;
    if (!interleaved) {
        const std::int64_t images = layout.image_segment_count();
        if (images > 1) {
            throw std::invalid_argument("build_mask: multiple image segments need an interleaved kind");
        }
        if (images == 1 && layout.segments.front().kind != SegmentKind::Image) {
            throw std::invalid_argument("build_mask: image segment must be the prefix");
        }
    }
}

}  // namespace

MaskMatrix build_mask(const SegmentLayout& layout, MaskKind kind) {
    check_layout_for_kind(layout, kind);
    const std::int64_t n = layout.total_len;
    MaskMatrix mask;
    mask.n = n;
    mask.allow.assign(static_cast<std::size_t>(n * n), 0);

    std::vector<SegmentKind> kinds(static_cast<std::size_t>(n));
    std::vector<std::int64_t> blocks(static_cast<std::size_t>(n));
    {
        std::int64_t pos = 0;
        for (std::size_t b = 0; b < layout.segments.size(); ++b) {
            for (std::int64_t t = 0; t < layout.segments[b].length; ++t, ++pos) {
                kinds[static_cast<std::size_t>(pos)] = layout.segments[b].kind;
                blocks[static_cast<std::size_t>(pos)] = static_cast<std::int64_t>(b);
            }
        }
    }

    for (std::int64_t i = 0; i < n; ++i) {
        const SegmentKind ki = kinds[static_cast<std::size_t>(i)];
        if (ki == SegmentKind::Pad) {
            mask.allow[static_cast<std::size_t>(i * n + i)] = 1;
            continue;
        }
        for (std::int64_t j = 0; j < n; ++j) {
            const SegmentKind kj = kinds[static_cast<std::size_t>(j)];
            if (kj == SegmentKind::Pad) continue;
            bool v;
            if (kind == MaskKind::InterleavedB) {
                const std::int64_t bi = blocks[static_cast<std::size_t>(i)];
                const std::int64_t bj = blocks[static_cast<std::size_t>(j)];
                v = bj < bi || (bj == bi && (kj == SegmentKind::Image || j <= i));
            } else {
                v = allow_rule(layout, kind, i, j, ki, kj);
            }
            mask.allow[static_cast<std::size_t>(i * n + j)] = v ? 1 : 0;
        }
    }
    return mask;
}

Tensor mask_to_bias(const MaskMatrix& mask) {
    if (mask.n <= 0 || mask.allow.size() != static_cast<std::size_t>(mask.n * mask.n)) {
        throw std::invalid_argument("mask_to_bias: malformed mask");
    }
    std::vector<double> bias(mask.allow.size());
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = mask.allow[i] ? 0.0 : kMaskBias;
    return Tensor::from_data({mask.n, mask.n}, std::move(bias), false);
}

Tensor mask_bias_cached(const SegmentLayout& layout, MaskKind kind) {
    static std::map<std::string, Tensor> cache;
    const std::string key = layout.key() + "|" + mask_kind_name(kind);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Tensor bias = mask_to_bias(build_mask(layout, kind));
    cache.emplace(key, bias);
    return bias;
}

std::set<std::int64_t> reachability(const MaskMatrix& mask, std::int64_t src) {
    if (src < 0 || src >= mask.n) throw std::invalid_argument("reachability: src out of range");
    std::set<std::int64_t> seen;
    std::vector<std::int64_t> frontier = {src};
    seen.insert(src);
    while (!frontier.empty()) {
        const std::int64_t i = frontier.back();
        frontier.pop_back();
        for (std::int64_t j = 0; j < mask.n; ++j) {
            if (mask.at(i, j) && !seen.count(j)) {
                seen.insert(j);
                frontier.push_back(j);
            }
        }
    }
    return seen;
}

std::optional<MaskViolation> validate_mask(const MaskMatrix& mask, const SegmentLayout& layout,
                                           MaskKind kind) {
    check_layout_for_kind(layout, kind);
    if (mask.n != layout.total_len) {
        return MaskViolation{-1, -1, false};
    }
    for (std::int64_t i = 0; i < mask.n; ++i) {
        for (std::int64_t j = 0; j < mask.n; ++j) {
            const bool want = expected_cell(layout, kind, i, j);
            if (mask.at(i, j) != want) return MaskViolation{i, j, want};
        }
    }
    return std::nullopt;
}

}  // namespace vlm
