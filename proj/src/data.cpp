#include "vlm/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace vlm {

using nlohmann::json;

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&]() {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else if (std::isspace(c)) {
            flush();
        } else {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return out;
}

Vocabulary::Vocabulary(std::int64_t max_size) : max_size_(max_size) {
    if (max_size < kReservedCount) {
        throw std::invalid_argument("Vocabulary: max_size below the reserved token count");
    }
    for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>", "<noise>", "<inst>", "<ans>"}) {
        ids_.emplace(w, static_cast<std::int64_t>(words_.size()));
        words_.emplace_back(w);
    }
}

std::int64_t Vocabulary::add_word(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    if (size() >= max_size_) {
        throw std::runtime_error("Vocabulary: overflow adding '" + word + "' (max " +
                                 std::to_string(max_size_) + ")");
    }
    const std::int64_t id = size();
    ids_.emplace(word, id);
    words_.push_back(word);
    return id;
}

std::int64_t Vocabulary::id_of(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word_of(std::int64_t id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("Vocabulary: id out of range");
    return words_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& word) const { return ids_.count(word) != 0; }

std::vector<std::int64_t> Vocabulary::encode(const std::string& text) const {
    std::vector<std::int64_t> ids;
    for (const std::string& w : tokenize_words(text)) ids.push_back(id_of(w));
    return ids;
}

std::string Vocabulary::decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word_of(ids[i]);
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Vocabulary: cannot write " + path);
    for (const std::string& w : words_) out << w << "\n";
    if (!out) throw std::runtime_error("Vocabulary: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path, std::int64_t max_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Vocabulary: cannot open " + path);
    Vocabulary vocab(max_size);
    std::string line;
    std::int64_t id = 0;
    while (std::getline(in, line)) {
        if (id < kReservedCount) {
            if (line != vocab.words_[static_cast<std::size_t>(id)]) {
                throw std::runtime_error("Vocabulary: reserved token mismatch in " + path);
            }
        } else {
            vocab.add_word(line);
        }
        ++id;
    }
    if (id < kReservedCount) throw std::runtime_error("Vocabulary: truncated file " + path);
    return vocab;
}

std::pair<std::vector<std::int64_t>, std::vector<std::uint8_t>> format_conversation(
    const std::vector<Turn>& turns, const Vocabulary& vocab) {
    if (turns.empty()) throw std::invalid_argument("format_conversation: no turns");
    std::vector<std::int64_t> ids = {Vocabulary::kBos};
    std::vector<std::uint8_t> supervised = {0};
    for (const Turn& turn : turns) {
        const auto inst = vocab.encode(turn.instruction);
        const auto ans = vocab.encode(turn.answer);
        if (inst.empty()) throw std::invalid_argument("format_conversation: empty instruction");
        if (ans.empty()) throw std::invalid_argument("format_conversation: empty answer");
        ids.push_back(Vocabulary::kInst);
        supervised.push_back(0);
        for (std::int64_t id : inst) {
            ids.push_back(id);
            supervised.push_back(0);
        }
        ids.push_back(Vocabulary::kAns);
        supervised.push_back(0);
        for (std::int64_t id : ans) {
            ids.push_back(id);
            supervised.push_back(1);
        }
    }
    ids.push_back(Vocabulary::kEos);
    supervised.push_back(1);
    return {std::move(ids), std::move(supervised)};
}

std::vector<Sample> load_jsonl(const std::string& path, const std::string& image_root,
                               const VLMConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
    std::vector<Sample> samples;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("load_jsonl: bad JSON at " + where + ": " + e.what());
        }
        if (!record.contains("image")) {
            throw std::runtime_error("load_jsonl: missing 'image' at " + where);
        }
        Sample sample;
        const std::string image_path =
            image_root.empty() ? record["image"].get<std::string>()
                               : image_root + "/" + record["image"].get<std::string>();
        sample.image = load_ppm(image_path);
        if (sample.image.width != cfg.vision.image_size ||
            sample.image.height != cfg.vision.image_size) {
            throw std::runtime_error("load_jsonl: image size mismatch at " + where + " (" +
                                     std::to_string(sample.image.width) + "x" +
                                     std::to_string(sample.image.height) + ", expected " +
                                     std::to_string(cfg.vision.image_size) + ")");
        }
        if (record.contains("caption")) {
            sample.caption = record["caption"].get<std::string>();
            if (tokenize_words(sample.caption).empty()) {
                throw std::runtime_error("load_jsonl: empty caption at " + where);
            }
        } else if (record.contains("turns")) {
            for (const json& t : record["turns"]) {
                sample.turns.push_back(Turn{t.at("instruction").get<std::string>(),
                                            t.at("answer").get<std::string>()});
            }
            if (sample.turns.empty()) {
                throw std::runtime_error("load_jsonl: empty turn list at " + where);
            }
        } else {
            throw std::runtime_error("load_jsonl: record needs 'caption' or 'turns' at " + where);
        }
        samples.push_back(std::move(sample));
    }
    return samples;
}

namespace {

struct ShapeTuple {
    std::size_t shape, color, size, cell;
};

std::vector<ShapeTuple> shuffled_tuples(const SyntheticShapesSpec& spec, std::uint64_t seed) {
    std::vector<ShapeTuple> tuples;
    for (std::size_t s = 0; s < spec.shapes.size(); ++s)
        for (std::size_t c = 0; c < spec.colors.size(); ++c)
            for (std::size_t z = 0; z < spec.sizes.size(); ++z)
                for (std::size_t p = 0; p < static_cast<std::size_t>(spec.grid * spec.grid); ++p)
                    tuples.push_back({s, c, z, p});
    RandomSource rng(seed);
    for (std::size_t i = tuples.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(tuples[i - 1], tuples[j]);
    }
    return tuples;
}

std::string cell_name(const SyntheticShapesSpec& spec, std::size_t cell) {
    const std::int64_t row = static_cast<std::int64_t>(cell) / spec.grid;
    const std::int64_t col = static_cast<std::int64_t>(cell) % spec.grid;
    std::string vertical = row == 0 ? "top" : row == spec.grid - 1 ? "bottom" : "middle";
    std::string horizontal = col == 0 ? "left" : col == spec.grid - 1 ? "right" : "center";
    return vertical + " " + horizontal;
}

void set_color(double& r, double& g, double& b, const std::string& name) {
    if (name == "red") {
        r = 1.0;
    } else if (name == "green") {
        g = 1.0;
    } else if (name == "blue") {
        b = 1.0;
    } else if (name == "yellow") {
        r = g = 1.0;
    } else {
        throw std::invalid_argument("render_synthetic: unknown color " + name);
    }
}

Image render_tuple(const SyntheticShapesSpec& spec, const ShapeTuple& t) {
    Image img = Image::black(spec.image_size, spec.image_size);
    const std::int64_t cell_size = spec.image_size / spec.grid;
    const std::int64_t row = static_cast<std::int64_t>(t.cell) / spec.grid;
    const std::int64_t col = static_cast<std::int64_t>(t.cell) % spec.grid;
    const std::int64_t cy = row * cell_size + cell_size / 2;
    const std::int64_t cx = col * cell_size + cell_size / 2;
    const std::int64_t r =
        spec.sizes[t.size] == "large" ? spec.large_radius : spec.small_radius;
    const std::string& shape = spec.shapes[t.shape];

    double red = 0.0, green = 0.0, blue = 0.0;
    set_color(red, green, blue, spec.colors[t.color]);

    for (std::int64_t y = cy - r; y <= cy + r; ++y) {
        for (std::int64_t x = cx - r; x <= cx + r; ++x) {
            if (y < 0 || y >= spec.image_size || x < 0 || x >= spec.image_size) continue;
            const std::int64_t dy = y - cy, dx = x - cx;
            bool inside;
            if (shape == "circle") {
                inside = dx * dx + dy * dy <= r * r;
            } else if (shape == "square") {
                inside = std::abs(dx) <= r && std::abs(dy) <= r;
            } else if (shape == "triangle") {
                inside = 2 * std::abs(dx) <= dy + r;
            } else {
                throw std::invalid_argument("render_synthetic: unknown shape " + shape);
            }
            if (inside) {
                img.at(0, y, x) = red;
                img.at(1, y, x) = green;
                img.at(2, y, x) = blue;
            }
        }
    }
    return img;
}

std::string tuple_caption(const SyntheticShapesSpec& spec, const ShapeTuple& t) {
    return "a " + spec.sizes[t.size] + " " + spec.colors[t.color] + " " + spec.shapes[t.shape] +
           " at the " + cell_name(spec, t.cell);
}

void check_spec(const SyntheticShapesSpec& spec) {
    if (spec.grid < 1 || spec.image_size < 1 || spec.image_size % spec.grid != 0) {
        throw std::invalid_argument("render_synthetic: grid must divide image_size");
    }
    if (spec.shapes.empty() || spec.colors.empty() || spec.sizes.empty()) {
        throw std::invalid_argument("render_synthetic: empty attribute set");
    }
    const std::int64_t cell = spec.image_size / spec.grid;
    if (2 * spec.large_radius >= cell || spec.small_radius < 1) {
        throw std::invalid_argument("render_synthetic: radii do not fit the cell");
    }
}

}  // namespace

std::vector<Sample> render_synthetic(const SyntheticShapesSpec& spec, std::int64_t n,
                                     std::uint64_t seed) {
    check_spec(spec);
    if (n < 1) throw std::invalid_argument("render_synthetic: n must be >= 1");
    const std::vector<ShapeTuple> tuples = shuffled_tuples(spec, seed);
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const ShapeTuple& t = tuples[static_cast<std::size_t>(i) % tuples.size()];
        Sample s;
        s.image = render_tuple(spec, t);
        s.caption = tuple_caption(spec, t);
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<Sample> render_synthetic_vqa(const SyntheticShapesSpec& spec, std::int64_t n,
                                         std::uint64_t seed) {
    check_spec(spec);
    if (n < 1) throw std::invalid_argument("render_synthetic_vqa: n must be >= 1");
    const std::vector<ShapeTuple> tuples = shuffled_tuples(spec, seed);
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const ShapeTuple& t = tuples[static_cast<std::size_t>(i) % tuples.size()];
        Sample s;
        s.image = render_tuple(spec, t);
        s.turns = {{"what color is the shape ?", spec.colors[t.color]},
                   {"what shape is it ?", spec.shapes[t.shape]}};
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<Sample> shuffle_caption_words(const std::vector<Sample>& samples, std::uint64_t seed) {
    RandomSource rng(seed);
    std::vector<Sample> out = samples;
    for (Sample& s : out) {
        if (s.caption.empty()) continue;
        std::vector<std::string> words = tokenize_words(s.caption);
        for (std::size_t i = words.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
            std::swap(words[i - 1], words[j]);
        }
        std::string joined;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) joined += ' ';
            joined += words[i];
        }
        s.caption = joined;
    }
    return out;
}

std::vector<std::int64_t> Batch::text_ids(std::int64_t sample) const {
    const auto& row = tokens[static_cast<std::size_t>(sample)];
    return {row.begin() + num_patches, row.end()};
}

Batch build_batch(const std::vector<Sample>& samples, int stage, const Vocabulary& vocab,
                  const VLMConfig& cfg, std::uint64_t seed,
                  std::vector<std::int64_t> sample_indices) {
    if (samples.empty()) throw std::invalid_argument("build_batch: no samples");
    if (stage < 0 || stage > 3) throw std::invalid_argument("build_batch: stage out of range");
    if (sample_indices.empty()) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            sample_indices.push_back(static_cast<std::int64_t>(i));
        }
    }
    if (sample_indices.size() != samples.size()) {
        throw std::invalid_argument("build_batch: sample_indices size mismatch");
    }

    const std::int64_t num_patches = cfg.vision.num_patches();
    std::vector<std::vector<std::int64_t>> text_ids, text_labels;
    std::int64_t width = 0;
    for (const Sample& s : samples) {
        std::vector<std::int64_t> ids, labels;
        if (stage == 3) {
            if (!s.is_conversation()) {
                throw std::invalid_argument("build_batch: stage 3 needs conversation samples");
            }
            auto [seq, supervised] = format_conversation(s.turns, vocab);
            ids = seq;
            labels.assign(ids.size(), kIgnoreIndex);
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                if (supervised[i + 1]) labels[i] = ids[i + 1];
            }
        } else {
            if (s.is_conversation()) {
                throw std::invalid_argument("build_batch: caption stages need caption samples");
            }
            const std::vector<std::int64_t> words = vocab.encode(s.caption);
            if (words.empty()) throw std::invalid_argument("build_batch: empty caption");
            ids.push_back(Vocabulary::kBos);
            ids.insert(ids.end(), words.begin(), words.end());
            labels = words;
            labels.push_back(Vocabulary::kEos);
        }
        width = std::max(width, static_cast<std::int64_t>(ids.size()));
        text_ids.push_back(std::move(ids));
        text_labels.push_back(std::move(labels));
    }
    if (num_patches + width > cfg.decoder.max_positions) {
        throw std::invalid_argument("build_batch: sequence exceeds max_positions");
    }

    Batch batch;
    batch.images.reserve(samples.size());
    for (const Sample& s : samples) batch.images.push_back(s.image);
    batch.sample_indices = std::move(sample_indices);
    batch.seed = seed;
    batch.num_patches = num_patches;
    batch.text_width = width;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::int64_t real = static_cast<std::int64_t>(text_ids[i].size());
        const std::int64_t pad = width - real;
        std::vector<std::int64_t> tokens(static_cast<std::size_t>(num_patches), Vocabulary::kPad);
        std::vector<std::int64_t> labels(static_cast<std::size_t>(num_patches), kIgnoreIndex);
        tokens.insert(tokens.end(), text_ids[i].begin(), text_ids[i].end());
        labels.insert(labels.end(), text_labels[i].begin(), text_labels[i].end());
        tokens.resize(static_cast<std::size_t>(num_patches + width), Vocabulary::kPad);
        labels.resize(static_cast<std::size_t>(num_patches + width), kIgnoreIndex);
        batch.tokens.push_back(std::move(tokens));
        batch.labels.push_back(std::move(labels));
        std::vector<Segment> segments = {{SegmentKind::Image, num_patches},
                                         {SegmentKind::Text, real}};
        if (pad > 0) segments.push_back({SegmentKind::Pad, pad});
        batch.layouts.push_back(SegmentLayout::of(std::move(segments)));
    }
    return batch;
}

Vocabulary vocab_from_corpus(const std::vector<Sample>& samples, std::int64_t max_size) {
    Vocabulary vocab(max_size);
    for (const Sample& s : samples) {
        if (s.is_conversation()) {
            for (const Turn& t : s.turns) {
                for (const std::string& w : tokenize_words(t.instruction)) vocab.add_word(w);
                for (const std::string& w : tokenize_words(t.answer)) vocab.add_word(w);
            }
        } else {
            for (const std::string& w : tokenize_words(s.caption)) vocab.add_word(w);
        }
    }
    return vocab;
}

}  // namespace vlm
