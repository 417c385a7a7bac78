#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "vlm/data.hpp"

using namespace vlm;

namespace {

std::vector<std::string> sorted_words(const std::string& text) {
    auto w = tokenize_words(text);
    std::sort(w.begin(), w.end());
    return w;
}

Vocabulary tiny_vocab(const std::vector<std::string>& words) {
    Vocabulary v(256);
    for (const auto& w : words) v.add_word(w);
    return v;
}

}  // namespace

TEST_CASE("tokenizer lowercases, splits on space, isolates punctuation") {
    CHECK(tokenize_words("Hello, World!") ==
          std::vector<std::string>{"hello", ",", "world", "!"});
    CHECK(tokenize_words("  a\tb\nc ") == std::vector<std::string>{"a", "b", "c"});
    CHECK(tokenize_words("don't stop") == std::vector<std::string>{"don", "'", "t", "stop"});
    CHECK(tokenize_words("abc123 x2") == std::vector<std::string>{"abc123", "x2"});
    CHECK(tokenize_words("?!") == std::vector<std::string>{"?", "!"});
    CHECK(tokenize_words("").empty());
    CHECK(tokenize_words("   ").empty());
}

TEST_CASE("vocabulary reserves control tokens at fixed ids") {
    Vocabulary v(32);
    CHECK(v.size() == Vocabulary::kReservedCount);
    CHECK(v.word_of(Vocabulary::kPad) == "<pad>");
    CHECK(v.word_of(Vocabulary::kBos) == "<bos>");
    CHECK(v.word_of(Vocabulary::kEos) == "<eos>");
    CHECK(v.word_of(Vocabulary::kUnk) == "<unk>");
    CHECK(v.word_of(Vocabulary::kNoise) == "<noise>");
    CHECK(v.word_of(Vocabulary::kInst) == "<inst>");
    CHECK(v.word_of(Vocabulary::kAns) == "<ans>");
    CHECK(v.id_of("<bos>") == Vocabulary::kBos);
    CHECK(v.contains("<ans>"));
}

TEST_CASE("vocabulary add, lookup, encode, decode") {
    Vocabulary v(32);
    const auto red = v.add_word("red");
    const auto dog = v.add_word("dog");
    CHECK(red == 7);
    CHECK(dog == 8);
    CHECK(v.add_word("red") == red);  // idempotent
    CHECK(v.size() == 9);
    CHECK(v.id_of("red") == red);
    CHECK(v.id_of("cat") == Vocabulary::kUnk);
    CHECK_FALSE(v.contains("cat"));
    CHECK(v.encode("Red RED cat dog") ==
          std::vector<std::int64_t>{red, red, Vocabulary::kUnk, dog});
    CHECK(v.decode({Vocabulary::kBos, red, dog, Vocabulary::kEos}) == "<bos> red dog <eos>");
    CHECK_THROWS_AS(v.word_of(-1), std::invalid_argument);
    CHECK_THROWS_AS(v.word_of(v.size()), std::invalid_argument);
}

TEST_CASE("vocabulary capacity limits") {
    CHECK_THROWS_AS(Vocabulary(6), std::invalid_argument);
    Vocabulary v(8);
    v.add_word("one");
    CHECK_THROWS_AS(v.add_word("two"), std::runtime_error);
    CHECK(v.add_word("one") == 7);  // existing word still fine at capacity
}

TEST_CASE("vocabulary save and load round-trip") {
    const std::string path = "test_data_vocab.txt";
    Vocabulary v(64);
    v.add_word("alpha");
    v.add_word("beta");
    v.add_word("gamma");
    v.save(path);

    Vocabulary loaded = Vocabulary::load(path, 64);
    CHECK(loaded.size() == v.size());
    CHECK(loaded.id_of("alpha") == v.id_of("alpha"));
    CHECK(loaded.id_of("gamma") == v.id_of("gamma"));
    CHECK(loaded.word_of(8) == "beta");

    // too small a cap for the stored extras
    CHECK_THROWS_AS(Vocabulary::load(path, 8), std::runtime_error);

    {
        std::ofstream out(path, std::ios::trunc);
        out << "<bad>\n<bos>\n<eos>\n<unk>\n<noise>\n<inst>\n<ans>\n";
    }
    CHECK_THROWS_AS(Vocabulary::load(path, 64), std::runtime_error);

    {
        std::ofstream out(path, std::ios::trunc);
        out << "<pad>\n<bos>\n";
    }
    CHECK_THROWS_AS(Vocabulary::load(path, 64), std::runtime_error);

    CHECK_THROWS_AS(Vocabulary::load("no_such_vocab_file.txt", 64), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("conversation template golden") {
    Vocabulary v = tiny_vocab({"what", "color", "is", "the", "shape", "?", "red"});
    const auto [ids, sup] = format_conversation({{"What color is the shape ?", "red"}}, v);

    const std::vector<std::int64_t> want = {
        Vocabulary::kBos,  Vocabulary::kInst, v.id_of("what"), v.id_of("color"),
        v.id_of("is"),     v.id_of("the"),    v.id_of("shape"), v.id_of("?"),
        Vocabulary::kAns,  v.id_of("red"),    Vocabulary::kEos};
    CHECK(ids == want);
    CHECK(sup == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1});
}

TEST_CASE("conversation template marks every answer span and the final eos") {
    Vocabulary v = tiny_vocab({"q", "a", "b"});
    const auto [ids, sup] =
        format_conversation({{"q", "a"}, {"q q", "a b"}}, v);
    // <bos> <inst> q <ans> a <inst> q q <ans> a b <eos>
    CHECK(ids.size() == 12);
    CHECK(sup == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 1});
    CHECK(ids[1] == Vocabulary::kInst);
    CHECK(ids[3] == Vocabulary::kAns);
    CHECK(ids[5] == Vocabulary::kInst);
    CHECK(ids[8] == Vocabulary::kAns);
    CHECK(ids.back() == Vocabulary::kEos);
}

TEST_CASE("conversation template rejects degenerate turns") {
    Vocabulary v = tiny_vocab({"q", "a"});
    CHECK_THROWS_AS(format_conversation({}, v), std::invalid_argument);
    CHECK_THROWS_AS(format_conversation({{"", "a"}}, v), std::invalid_argument);
    CHECK_THROWS_AS(format_conversation({{"q", "  "}}, v), std::invalid_argument);
}

// Pinned output of the seed-42 enumeration shuffle. Guards the tuple order,
// the caption template, and the rasterizer all at once.
TEST_CASE("synthetic corpus seed-42 golden") {
    SyntheticShapesSpec spec;
    const auto samples = render_synthetic(spec, 8, 42);
    REQUIRE(samples.size() == 8);

    CHECK(samples[0].caption == "a small green square at the top right");
    CHECK(samples[1].caption == "a large green square at the top left");
    CHECK(samples[2].caption == "a small yellow triangle at the top right");
    CHECK(samples[3].caption == "a small yellow circle at the top left");

    CHECK(image_checksum(samples[0].image) == 10231112837025155000ULL);
    CHECK(image_checksum(samples[1].image) == 12962223076245806520ULL);
    CHECK(image_checksum(samples[2].image) == 1316563897325653541ULL);
    CHECK(image_checksum(samples[3].image) == 11965265192106404389ULL);

    // small green square, top right cell: center (y=8, x=24), radius 3
    const Image& img = samples[0].image;
    CHECK(img.at(1, 8, 24) == 1.0);
    CHECK(img.at(0, 8, 24) == 0.0);
    CHECK(img.at(2, 8, 24) == 0.0);
    CHECK(img.at(1, 5, 21) == 1.0);   // corner
    CHECK(img.at(1, 11, 27) == 1.0);  // opposite corner
    CHECK(img.at(1, 8, 28) == 0.0);   // one past the edge
    CHECK(img.at(1, 4, 24) == 0.0);
    CHECK(img.at(1, 24, 8) == 0.0);   // other cell stays black
}

TEST_CASE("synthetic corpus determinism and cycling") {
    SyntheticShapesSpec spec;
    const auto a = render_synthetic(spec, 8, 42);
    const auto b = render_synthetic(spec, 8, 42);
    for (int i = 0; i < 8; ++i) {
        CHECK(a[i].caption == b[i].caption);
        CHECK(image_checksum(a[i].image) == image_checksum(b[i].image));
    }

    const auto other = render_synthetic(spec, 96, 43);
    const auto base = render_synthetic(spec, 96, 42);
    bool differs = false;
    for (int i = 0; i < 96; ++i) differs = differs || other[i].caption != base[i].caption;
    CHECK(differs);

    // 3 shapes x 4 colors x 2 sizes x 4 cells = 96 distinct tuples, then cycle
    std::set<std::string> caps;
    for (const auto& s : base) caps.insert(s.caption);
    CHECK(caps.size() == 96);
    const auto wrapped = render_synthetic(spec, 97, 7);
    CHECK(wrapped[96].caption == wrapped[0].caption);
    CHECK(image_checksum(wrapped[96].image) == image_checksum(wrapped[0].image));
    CHECK(wrapped[0].caption == "a large blue square at the top right");
    CHECK(wrapped[95].caption == "a large blue triangle at the bottom right");
}

TEST_CASE("synthetic rasterizer geometry on a single cell") {
    SyntheticShapesSpec spec;
    spec.image_size = 16;
    spec.grid = 1;
    spec.colors = {"yellow"};
    spec.sizes = {"large"};  // radius 6, center (8, 8)

    spec.shapes = {"circle"};
    const Image circle = render_synthetic(spec, 1, 0)[0].image;
    CHECK(circle.at(0, 8, 14) == 1.0);  // dx = 6 on the rim
    CHECK(circle.at(1, 8, 14) == 1.0);  // yellow = red + green
    CHECK(circle.at(2, 8, 14) == 0.0);
    CHECK(circle.at(0, 12, 12) == 1.0);  // 4^2 + 4^2 <= 36
    CHECK(circle.at(0, 13, 12) == 0.0);  // 5^2 + 4^2 > 36
    CHECK(circle.at(0, 8, 15) == 0.0);

    spec.shapes = {"triangle"};
    const Image tri = render_synthetic(spec, 1, 0)[0].image;
    CHECK(tri.at(0, 2, 8) == 1.0);   // apex
    CHECK(tri.at(0, 2, 9) == 0.0);
    CHECK(tri.at(0, 14, 2) == 1.0);  // base spans the full width
    CHECK(tri.at(0, 14, 14) == 1.0);
    CHECK(tri.at(0, 14, 1) == 0.0);
}

TEST_CASE("synthetic spec validation") {
    SyntheticShapesSpec spec;
    CHECK_THROWS_AS(render_synthetic(spec, 0, 0), std::invalid_argument);

    spec.grid = 3;  // 3 does not divide 32
    CHECK_THROWS_AS(render_synthetic(spec, 1, 0), std::invalid_argument);
    spec.grid = 2;

    spec.large_radius = 8;  // diameter fills the 16-pixel cell
    CHECK_THROWS_AS(render_synthetic(spec, 1, 0), std::invalid_argument);
    spec.large_radius = 6;

    spec.shapes.clear();
    CHECK_THROWS_AS(render_synthetic(spec, 1, 0), std::invalid_argument);
}

TEST_CASE("vqa corpus shares images with the caption corpus") {
    SyntheticShapesSpec spec;
    const auto caps = render_synthetic(spec, 4, 42);
    const auto vqa = render_synthetic_vqa(spec, 4, 42);
    REQUIRE(vqa.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(image_checksum(vqa[i].image) == image_checksum(caps[i].image));
        REQUIRE(vqa[i].turns.size() == 2);
        CHECK(vqa[i].is_conversation());
    }
    CHECK(vqa[0].turns[0].instruction == "what color is the shape ?");
    CHECK(vqa[0].turns[0].answer == "green");
    CHECK(vqa[0].turns[1].instruction == "what shape is it ?");
    CHECK(vqa[0].turns[1].answer == "square");
}

TEST_CASE("caption shuffling permutes words but not images") {
    SyntheticShapesSpec spec;
    const auto base = render_synthetic(spec, 32, 42);
    const auto shuffled = shuffle_caption_words(base, 9);
    const auto again = shuffle_caption_words(base, 9);

    bool changed = false;
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(sorted_words(shuffled[i].caption) == sorted_words(base[i].caption));
        CHECK(shuffled[i].caption == again[i].caption);
        CHECK(image_checksum(shuffled[i].image) == image_checksum(base[i].image));
        changed = changed || shuffled[i].caption != base[i].caption;
    }
    CHECK(changed);

    const auto vqa = render_synthetic_vqa(spec, 2, 42);
    const auto vqa_pass = shuffle_caption_words(vqa, 9);
    CHECK(vqa_pass[0].turns[0].answer == vqa[0].turns[0].answer);
}

TEST_CASE("caption batch packs image span, text, and padding") {
    const VLMConfig cfg = VLMConfig::desk();
    Vocabulary v = tiny_vocab({"red", "dog", "big", "runs"});
    Sample s0, s1;
    s0.image = Image::black(32, 32);
    s0.caption = "red dog";
    s1.image = Image::black(32, 32);
    s1.caption = "big red dog runs";

    const Batch batch = build_batch({s0, s1}, 1, v, cfg, 77);
    CHECK(batch.size() == 2);
    CHECK(batch.num_patches == 16);
    CHECK(batch.text_width == 5);  // <bos> + 4 words
    CHECK(batch.seed == 77);
    CHECK(batch.sample_indices == std::vector<std::int64_t>{0, 1});
    REQUIRE(batch.tokens[0].size() == 21);
    REQUIRE(batch.labels[0].size() == 21);

    for (int j = 0; j < 16; ++j) {
        CHECK(batch.tokens[0][j] == Vocabulary::kPad);
        CHECK(batch.labels[0][j] == kIgnoreIndex);
    }
    const std::vector<std::int64_t> text0 = {Vocabulary::kBos, v.id_of("red"), v.id_of("dog"),
                                             Vocabulary::kPad, Vocabulary::kPad};
    CHECK(batch.text_ids(0) == text0);
    CHECK(batch.labels[0][16] == v.id_of("red"));
    CHECK(batch.labels[0][17] == v.id_of("dog"));
    CHECK(batch.labels[0][18] == Vocabulary::kEos);
    CHECK(batch.labels[0][19] == kIgnoreIndex);
    CHECK(batch.labels[0][20] == kIgnoreIndex);

    CHECK(batch.layouts[0].key() == "I16,T3,P2");
    CHECK(batch.layouts[1].key() == "I16,T5");
    CHECK(batch.tokens[1][16] == Vocabulary::kBos);
    CHECK(batch.labels[1][20] == Vocabulary::kEos);

    const Batch named = build_batch({s0, s1}, 1, v, cfg, 77, {7, 3});
    CHECK(named.sample_indices == std::vector<std::int64_t>{7, 3});
}

TEST_CASE("conversation batch supervises answers and eos only") {
    const VLMConfig cfg = VLMConfig::desk();
    SyntheticShapesSpec spec;
    const auto vqa = render_synthetic_vqa(spec, 2, 42);
    Vocabulary v = vocab_from_corpus(vqa, 256);

    const Batch batch = build_batch(vqa, 3, v, cfg, 5);
    const auto [ids, sup] = format_conversation(vqa[0].turns, v);
    REQUIRE(batch.text_width == static_cast<std::int64_t>(ids.size()));

    int supervised_positions = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::int64_t label = batch.labels[0][16 + i];
        if (i + 1 < ids.size() && sup[i + 1]) {
            CHECK(label == ids[i + 1]);
            ++supervised_positions;
        } else {
            CHECK(label == kIgnoreIndex);
        }
    }
    CHECK(supervised_positions == 3);  // two one-word answers + <eos>
    CHECK(batch.labels[0][16 + ids.size() - 1] == kIgnoreIndex);  // nothing after <eos>
}

TEST_CASE("batch construction rejects bad input") {
    const VLMConfig cfg = VLMConfig::desk();
    SyntheticShapesSpec spec;
    const auto caps = render_synthetic(spec, 2, 42);
    const auto vqa = render_synthetic_vqa(spec, 2, 42);
    Vocabulary v = vocab_from_corpus(caps, 256);

    CHECK_THROWS_AS(build_batch({}, 1, v, cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_batch(caps, -1, v, cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_batch(caps, 4, v, cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_batch(caps, 3, v, cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_batch(vqa, 2, v, cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_batch(caps, 1, v, cfg, 0, {0}), std::invalid_argument);

    // 16 patches + 113 text tokens lands one past max_positions = 128
    Sample long_sample;
    long_sample.image = Image::black(32, 32);
    for (int i = 0; i < 112; ++i) long_sample.caption += i ? " a" : "a";
    Vocabulary va = tiny_vocab({"a"});
    CHECK_THROWS_AS(build_batch({long_sample}, 1, va, cfg, 0), std::invalid_argument);
    Sample fits = long_sample;
    fits.caption = fits.caption.substr(0, 2 * 111 - 1);
    CHECK_NOTHROW(build_batch({fits}, 1, va, cfg, 0));
}

TEST_CASE("corpus vocabulary covers every word in order") {
    SyntheticShapesSpec spec;
    const auto caps = render_synthetic(spec, 96, 42);
    Vocabulary v = vocab_from_corpus(caps, 256);
    // 16 distinct caption words on top of the 7 reserved tokens
    CHECK(v.size() == 23);
    for (const auto& w : {"a", "small", "large", "red", "green", "blue", "yellow", "circle",
                          "square", "triangle", "at", "the", "top", "bottom", "left", "right"}) {
        CHECK(v.contains(w));
    }
    // first caption's words claim the first free ids
    const auto first = tokenize_words(caps[0].caption);
    CHECK(v.id_of(first[0]) == Vocabulary::kReservedCount);

    const auto vqa = render_synthetic_vqa(spec, 4, 42);
    Vocabulary vv = vocab_from_corpus(vqa, 256);
    CHECK(vv.contains("what"));
    CHECK(vv.contains("?"));
    CHECK(vv.contains("green"));

    CHECK_THROWS_AS(vocab_from_corpus(caps, 10), std::runtime_error);
}

TEST_CASE("jsonl ingestion round-trips captions, turns, and pixels") {
    const std::string dir = "test_data_jsonl";
    std::filesystem::create_directory(dir);
    SyntheticShapesSpec spec;
    const auto samples = render_synthetic(spec, 2, 42);
    save_ppm(dir + "/img0.ppm", samples[0].image);
    save_ppm(dir + "/img1.ppm", samples[1].image);

    const std::string path = dir + "/corpus.jsonl";
    {
        std::ofstream out(path);
        out << R"({"image": "img0.ppm", "caption": "a red circle"})" << "\n";
        out << "\n";  // blank lines are skipped
        out << R"({"image": "img1.ppm", "turns": [{"instruction": "what is it ?", "answer": "a circle"}]})"
            << "\n";
    }

    const VLMConfig cfg = VLMConfig::desk();
    const auto loaded = load_jsonl(path, dir, cfg);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].caption == "a red circle");
    CHECK_FALSE(loaded[0].is_conversation());
    // pixel values are exact multiples of 1/255 so the PPM round-trip is exact
    CHECK(image_checksum(loaded[0].image) == image_checksum(samples[0].image));
    REQUIRE(loaded[1].turns.size() == 1);
    CHECK(loaded[1].turns[0].instruction == "what is it ?");
    CHECK(loaded[1].turns[0].answer == "a circle");

    // empty root means paths resolve as written
    {
        std::ofstream out(path, std::ios::trunc);
        out << R"({"image": ")" << dir << R"(/img0.ppm", "caption": "ok"})" << "\n";
    }
    CHECK(load_jsonl(path, "", cfg).size() == 1);

    std::filesystem::remove_all(dir);
}

TEST_CASE("jsonl ingestion reports the offending line") {
    const std::string dir = "test_data_jsonl_bad";
    std::filesystem::create_directory(dir);
    SyntheticShapesSpec spec;
    save_ppm(dir + "/img.ppm", render_synthetic(spec, 1, 42)[0].image);
    const VLMConfig cfg = VLMConfig::desk();
    const std::string path = dir + "/bad.jsonl";

    CHECK_THROWS_AS(load_jsonl(dir + "/nope.jsonl", dir, cfg), std::runtime_error);

    auto write_and_expect = [&](const std::string& body, const std::string& fragment) {
        {
            std::ofstream out(path, std::ios::trunc);
            out << body;
        }
        try {
            load_jsonl(path, dir, cfg);
            FAIL("expected load_jsonl to throw for: " << body);
        } catch (const std::runtime_error& e) {
            const std::string msg = e.what();
            CHECK(msg.find(fragment) != std::string::npos);
        }
    };

    write_and_expect(R"({"image": "img.ppm", "caption": "ok"})"
                     "\nnot json\n",
                     ":2");
    write_and_expect(R"({"caption": "no image"})" "\n", "image");
    write_and_expect(R"({"image": "img.ppm"})" "\n", "caption");
    write_and_expect(R"({"image": "img.ppm", "caption": "  "})" "\n", "caption");
    write_and_expect(R"({"image": "img.ppm", "turns": []})" "\n", "turn");

    Image small = Image::black(16, 16);
    save_ppm(dir + "/small.ppm", small);
    write_and_expect(R"({"image": "small.ppm", "caption": "tiny"})" "\n", "size");

    std::filesystem::remove_all(dir);
}
