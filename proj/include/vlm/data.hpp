#pragma once

// Tokenization, dataset ingestion, the conversation template, batching,
// and the deterministic synthetic shapes corpus.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vlm/image.hpp"
#include "vlm/masks.hpp"
#include "vlm/model.hpp"

namespace vlm {

// Lowercases and splits on whitespace; punctuation becomes its own token.
std::vector<std::string> tokenize_words(const std::string& text);

class Vocabulary {
public:
    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kBos = 1;
    static constexpr std::int64_t kEos = 2;
    static constexpr std::int64_t kUnk = 3;
    static constexpr std::int64_t kNoise = 4;
    static constexpr std::int64_t kInst = 5;
    static constexpr std::int64_t kAns = 6;
    static constexpr std::int64_t kReservedCount = 7;

    explicit Vocabulary(std::int64_t max_size);

    // Build-time insert; returns the id. Throws once max_size would be
    // exceeded.
    std::int64_t add_word(const std::string& word);
    // Inference lookup: unknown words map to <unk>.
    std::int64_t id_of(const std::string& word) const;
    const std::string& word_of(std::int64_t id) const;
    bool contains(const std::string& word) const;
    std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
    std::int64_t max_size() const { return max_size_; }

    // Word ids for a text, no specials added; unknown maps to <unk>.
    std::vector<std::int64_t> encode(const std::string& text) const;
    // Space-joined words; reserved ids print their angle-bracket names.
    std::string decode(const std::vector<std::int64_t>& ids) const;

    void save(const std::string& path) const;  // one token per line, line == id
    static Vocabulary load(const std::string& path, std::int64_t max_size);

private:
    std::int64_t max_size_;
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int64_t> ids_;
};

struct Turn {
    std::string instruction;
    std::string answer;
};

struct Sample {
    Image image;
    std::string caption;       // caption sample when non-empty
    std::vector<Turn> turns;   // conversation sample otherwise

    bool is_conversation() const { return !turns.empty(); }
};

// <bos>, then per turn <inst> instruction-words <ans> answer-words, then
// <eos>. The flag vector marks supervised sequence positions: answer words
// and the final <eos>.
std::pair<std::vector<std::int64_t>, std::vector<std::uint8_t>> format_conversation(
    const std::vector<Turn>& turns, const Vocabulary& vocab);

// Records are {"image": relpath, "caption": str} or {"image": relpath,
// "turns": [{"instruction","answer"}...]}. Images are PPM, must match the
// configured size exactly.
std::vector<Sample> load_jsonl(const std::string& path, const std::string& image_root,
                               const VLMConfig& cfg);

struct SyntheticShapesSpec {
    std::int64_t image_size = 32;
    std::int64_t grid = 2;  // grid x grid placement cells
    std::int64_t large_radius = 6;
    std::int64_t small_radius = 3;
    std::vector<std::string> shapes = {"circle", "square", "triangle"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    std::vector<std::string> sizes = {"small", "large"};
};

// n caption samples cycling a seed-shuffled enumeration of every
// (shape, color, size, cell) tuple. Pure in (spec, n, seed).
std::vector<Sample> render_synthetic(const SyntheticShapesSpec& spec, std::int64_t n,
                                     std::uint64_t seed);

// Same images, but two-turn conversations asking color and shape.
std::vector<Sample> render_synthetic_vqa(const SyntheticShapesSpec& spec, std::int64_t n,
                                         std::uint64_t seed);

// Returns a copy with each caption's words shuffled (seeded, per caption).
std::vector<Sample> shuffle_caption_words(const std::vector<Sample>& samples, std::uint64_t seed);

struct Batch {
    std::vector<Image> images;
    // Both matrices span the full packed sequence: num_patches dummy <pad>
    // entries, then text, then padding to the batch-wide text width.
    std::vector<std::vector<std::int64_t>> tokens;
    std::vector<std::vector<std::int64_t>> labels;  // kIgnoreIndex off supervision
    std::vector<SegmentLayout> layouts;
    std::vector<std::int64_t> sample_indices;  // positions in the source dataset
    std::uint64_t seed = 0;
    std::int64_t num_patches = 0;
    std::int64_t text_width = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(tokens.size()); }
    // The sample's real token ids over the text span (pads included).
    std::vector<std::int64_t> text_ids(std::int64_t sample) const;
};

// stage 3 expects conversation samples, stages 0..2 caption samples.
// sample_indices names each sample's position in the full dataset (used for
// per-sample noise streams); pass {} for 0..n-1.
Batch build_batch(const std::vector<Sample>& samples, int stage, const Vocabulary& vocab,
                  const VLMConfig& cfg, std::uint64_t seed,
                  std::vector<std::int64_t> sample_indices = {});

// Builds a vocabulary from every caption and conversation in the corpus,
// in corpus order.
Vocabulary vocab_from_corpus(const std::vector<Sample>& samples, std::int64_t max_size);

}  // namespace vlm
