// vlm: one binary for the whole pipeline. Subcommands cover stage training,
// generation, metric evaluation, mask inspection, gradient checking, corpus
// loss comparison, and synthetic-corpus materialization.
//
// Exit codes: 0 ok, 1 the command's contract could not be met (missing or
// bad inputs, failed check), 2 usage error. Diagnostics go to stderr; data
// goes to files and stdout.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vlm/data.hpp"
#include "vlm/gradcheck.hpp"
#include "vlm/metrics.hpp"
#include "vlm/model.hpp"
#include "vlm/training.hpp"

using nlohmann::json;
using namespace vlm;

namespace {

// Flag misuse discovered after CLI11 parsing (bad metric names, zero
// --max-new, malformed layout specs). Mapped to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr double kGradCheckThreshold = 1e-3;

std::string default_out_dir() {
    const char* env = std::getenv("VLM_OUT_DIR");
    return (env != nullptr && *env != '\0') ? env : ".";
}

std::string parent_of(const std::string& path) {
    const std::string parent = std::filesystem::path(path).parent_path().string();
    return parent.empty() ? std::string(".") : parent;
}

void require_file(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path))
        throw std::runtime_error(std::string(what) + " not found: " + path);
}

void atomic_write_text(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out << text;
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

VLMConfig preset_config(const std::string& name) {
    if (name == "desk") return VLMConfig::desk();
    if (name == "full") return VLMConfig::full_scale();
    throw UsageError("unknown preset '" + name + "' (valid: desk, full)");
}

StageConfig preset_stage(const std::string& name, int stage) {
    return name == "desk" ? desk_stage_defaults(stage) : stage_defaults(stage);
}

json vision_json(const VisionEncoderConfig& c) {
    return json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
                {"hidden", c.hidden},         {"layers", c.layers},
                {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio}};
}

json decoder_json(const DecoderConfig& c) {
    return json{{"hidden", c.hidden},       {"intermediate", c.intermediate},
                {"layers", c.layers},       {"heads", c.heads},
                {"kv_heads", c.kv_heads},   {"vocab", c.vocab},
                {"max_positions", c.max_positions}};
}

json stage_json(const StageConfig& s) {
    return json{{"mask", mask_kind_name(s.mask_kind)},
                {"lr_vision", s.lr_vision},
                {"lr_projector", s.lr_projector},
                {"lr_language", s.lr_language},
                {"noise_rate", s.noise_rate},
                {"epochs", s.epochs},
                {"global_batch", s.global_batch},
                {"micro_batch", s.micro_batch},
                {"min_lr", s.min_lr},
                {"clip_norm", s.clip_norm}};
}

// Applies the keys present in `patch` to the target fields, rejecting keys
// the schema does not know about. Used for the train config file.
template <typename Apply>
void apply_known_keys(const json& patch, const char* where,
                      const std::vector<std::string>& known, const Apply& apply) {
    if (!patch.is_object()) throw UsageError(std::string("config: ") + where + " must be an object");
    for (const auto& [key, value] : patch.items()) {
        bool ok = false;
        for (const auto& k : known) ok = ok || (k == key);
        if (!ok) throw UsageError(std::string("config: unknown key '") + key + "' in " + where);
        apply(key, value);
    }
}

void apply_stage_overrides(const json& patch, StageConfig& stage) {
    apply_known_keys(patch, "stage",
                     {"lr_vision", "lr_projector", "lr_language", "noise_rate", "epochs",
                      "global_batch", "micro_batch", "min_lr", "clip_norm"},
                     [&](const std::string& key, const json& value) {
                         if (key == "lr_vision") stage.lr_vision = value.get<double>();
                         if (key == "lr_projector") stage.lr_projector = value.get<double>();
                         if (key == "lr_language") stage.lr_language = value.get<double>();
                         if (key == "noise_rate") stage.noise_rate = value.get<double>();
                         if (key == "epochs") stage.epochs = value.get<std::int64_t>();
                         if (key == "global_batch") stage.global_batch = value.get<std::int64_t>();
                         if (key == "micro_batch") stage.micro_batch = value.get<std::int64_t>();
                         if (key == "min_lr") stage.min_lr = value.get<double>();
                         if (key == "clip_norm") stage.clip_norm = value.get<double>();
                     });
}

void apply_model_overrides(const json& patch, VLMConfig& cfg) {
    apply_known_keys(patch, "model", {"vision", "decoder"}, [&](const std::string& key, const json& value) {
        if (key == "vision") {
            apply_known_keys(value, "model.vision",
                             {"image_size", "patch_size", "hidden", "layers", "heads", "mlp_ratio"},
                             [&](const std::string& f, const json& v) {
                                 if (f == "image_size") cfg.vision.image_size = v.get<std::int64_t>();
                                 if (f == "patch_size") cfg.vision.patch_size = v.get<std::int64_t>();
                                 if (f == "hidden") cfg.vision.hidden = v.get<std::int64_t>();
                                 if (f == "layers") cfg.vision.layers = v.get<std::int64_t>();
                                 if (f == "heads") cfg.vision.heads = v.get<std::int64_t>();
                                 if (f == "mlp_ratio") cfg.vision.mlp_ratio = v.get<double>();
                             });
        } else {
            apply_known_keys(value, "model.decoder",
                             {"hidden", "intermediate", "layers", "heads", "kv_heads", "vocab",
                              "max_positions"},
                             [&](const std::string& f, const json& v) {
                                 if (f == "hidden") cfg.decoder.hidden = v.get<std::int64_t>();
                                 if (f == "intermediate") cfg.decoder.intermediate = v.get<std::int64_t>();
                                 if (f == "layers") cfg.decoder.layers = v.get<std::int64_t>();
                                 if (f == "heads") cfg.decoder.heads = v.get<std::int64_t>();
                                 if (f == "kv_heads") cfg.decoder.kv_heads = v.get<std::int64_t>();
                                 if (f == "vocab") cfg.decoder.vocab = v.get<std::int64_t>();
                                 if (f == "max_positions") cfg.decoder.max_positions = v.get<std::int64_t>();
                             });
        }
    });
}

json load_json_file(const std::string& path, const char* what) {
    require_file(path, what);
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string(what) + " " + path + ": " + e.what());
    }
}

// Encodes free text against the vocabulary, warning once per unknown word.
std::vector<std::int64_t> encode_with_warnings(const Vocabulary& vocab, const std::string& text) {
    std::vector<std::int64_t> ids;
    for (const auto& word : tokenize_words(text)) {
        if (!vocab.contains(word))
            std::cerr << "warning: unknown token '" << word << "' mapped to <unk>\n";
        ids.push_back(vocab.id_of(word));
    }
    return ids;
}

Vocabulary load_vocab_for(const std::string& vocab_flag, const std::string& ckpt_path,
                          const VLMConfig& cfg) {
    std::string path = vocab_flag;
    if (path.empty()) {
        path = parent_of(ckpt_path) + "/vocab.txt";
        if (!std::filesystem::exists(path))
            throw std::runtime_error("no vocabulary next to checkpoint (" + path +
                                     "); pass --vocab");
    } else {
        require_file(path, "vocabulary");
    }
    return Vocabulary::load(path, cfg.decoder.vocab);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    int stage = 0;
    std::string config_path;
    std::string data;
    std::string image_root;
    std::string out;
    std::string vocab_path;
    std::string resume;
    std::string preset;
    std::uint64_t seed = 0;
    std::int64_t epochs = -1;
    std::int64_t global_batch = -1;
    std::int64_t micro_batch = -1;
    double lr_vision = -1.0;
    double lr_projector = -1.0;
    double lr_language = -1.0;
    double noise_rate = -1.0;
    double min_lr = -1.0;
    double clip_norm = -1.0;
};

void cmd_train(const TrainArgs& args) {
    json file;
    if (!args.config_path.empty()) file = load_json_file(args.config_path, "config");

    // Precedence: preset defaults, then config file, then flags.
    std::string preset = "desk";
    if (file.contains("preset")) preset = file["preset"].get<std::string>();
    if (!args.preset.empty()) preset = args.preset;

    VLMConfig cfg = preset_config(preset);
    StageConfig stage = preset_stage(preset, args.stage);

    std::string data = args.data, image_root = args.image_root, out = args.out;
    std::string vocab_path = args.vocab_path, resume = args.resume;
    std::uint64_t seed = args.seed;
    bool seed_from_flag = false;

    if (!file.is_null()) {
        apply_known_keys(file, "top level",
                         {"preset", "data", "image_root", "out", "seed", "vocab", "resume",
                          "model", "stage"},
                         [&](const std::string& key, const json& value) {
                             if (key == "data" && data.empty()) data = value.get<std::string>();
                             if (key == "image_root" && image_root.empty())
                                 image_root = value.get<std::string>();
                             if (key == "out" && out.empty()) out = value.get<std::string>();
                             if (key == "seed" && !seed_from_flag) seed = value.get<std::uint64_t>();
                             if (key == "vocab" && vocab_path.empty())
                                 vocab_path = value.get<std::string>();
                             if (key == "resume" && resume.empty()) resume = value.get<std::string>();
                             if (key == "model") apply_model_overrides(value, cfg);
                             if (key == "stage") apply_stage_overrides(value, stage);
                         });
    }
    // Flags win over the config file. A negative sentinel means "not given".
    if (args.seed != 0) seed = args.seed;
    if (args.epochs >= 0) stage.epochs = args.epochs;
    if (args.global_batch >= 0) stage.global_batch = args.global_batch;
    if (args.micro_batch >= 0) stage.micro_batch = args.micro_batch;
    if (args.lr_vision >= 0.0) stage.lr_vision = args.lr_vision;
    if (args.lr_projector >= 0.0) stage.lr_projector = args.lr_projector;
    if (args.lr_language >= 0.0) stage.lr_language = args.lr_language;
    if (args.noise_rate >= 0.0) stage.noise_rate = args.noise_rate;
    if (args.min_lr >= 0.0) stage.min_lr = args.min_lr;
    if (args.clip_norm >= 0.0) stage.clip_norm = args.clip_norm;

    if (data.empty()) throw UsageError("no dataset: pass --data or put \"data\" in the config");
    if (out.empty()) out = default_out_dir();

    cfg.validate();
    stage.validate();

    require_file(data, "dataset");
    const std::string root = image_root.empty() ? parent_of(data) : image_root;
    const auto samples = load_jsonl(data, root, cfg);

    Vocabulary vocab = vocab_path.empty() ? vocab_from_corpus(samples, cfg.decoder.vocab)
                                          : Vocabulary::load(vocab_path, cfg.decoder.vocab);

    VLMParams params = [&] {
        if (resume.empty()) {
            RandomSource rng(seed);
            return VLMParams::init(cfg, rng);
        }
        require_file(resume, "checkpoint");
        auto [ck_cfg, ck_params] = load_checkpoint(resume);
        const json want{{"vision", vision_json(cfg.vision)}, {"decoder", decoder_json(cfg.decoder)}};
        const json got{{"vision", vision_json(ck_cfg.vision)},
                       {"decoder", decoder_json(ck_cfg.decoder)}};
        if (want != got)
            throw std::runtime_error("checkpoint config mismatch: run wants " + want.dump() +
                                     ", checkpoint has " + got.dump());
        return std::move(ck_params);
    }();

    std::filesystem::create_directories(out);
    const std::string tag = "stage" + std::to_string(args.stage);
    const std::string ckpt_path = out + "/" + tag + ".ckpt";
    const std::string csv_path = out + "/" + tag + "_curve.csv";

    std::cerr << tag << ": " << samples.size() << " samples, vocab " << vocab.size() << ", seed "
              << seed << "\n";
    const StageResult result = run_stage(samples, vocab, params, cfg, stage, seed, ckpt_path, csv_path);

    vocab.save(out + "/vocab.txt");
    const double final_loss = result.curve.back().loss;
    json manifest{{"command", "train"},
                  {"preset", preset},
                  {"stage", args.stage},
                  {"seed", seed},
                  {"data", data},
                  {"image_root", root},
                  {"resume", resume},
                  {"model", json{{"vision", vision_json(cfg.vision)},
                                 {"decoder", decoder_json(cfg.decoder)}}},
                  {"stage_config", stage_json(stage)},
                  {"dataset_size", samples.size()},
                  {"vocab_size", vocab.size()},
                  {"steps", result.curve.size()},
                  {"final_loss", final_loss},
                  {"checkpoint", ckpt_path},
                  {"curve_csv", csv_path},
                  {"vocab", out + "/vocab.txt"}};
    atomic_write_text(out + "/" + tag + "_manifest.json", manifest.dump(2) + "\n");

    std::printf("steps=%zu final_loss=%.17g\n", result.curve.size(), final_loss);
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
    std::string ckpt;
    std::string image;
    std::string prompt;
    std::string inst;
    std::string vocab_path;
    std::int64_t max_new = 0;
    std::int64_t topk = 0;
    std::uint64_t seed = 0;
};

void cmd_generate(const GenerateArgs& args) {
    if (args.max_new <= 0) throw UsageError("--max-new must be positive");
    if (!args.prompt.empty() && !args.inst.empty())
        throw UsageError("--prompt and --inst are mutually exclusive");

    require_file(args.ckpt, "checkpoint");
    auto [cfg, params] = load_checkpoint(args.ckpt);
    const Vocabulary vocab = load_vocab_for(args.vocab_path, args.ckpt, cfg);

    require_file(args.image, "image");
    const Image image = load_ppm(args.image);
    if (image.width != cfg.vision.image_size || image.height != cfg.vision.image_size)
        throw std::runtime_error("image size mismatch: got " + std::to_string(image.width) + "x" +
                                 std::to_string(image.height) + ", model wants " +
                                 std::to_string(cfg.vision.image_size) + "x" +
                                 std::to_string(cfg.vision.image_size));

    std::vector<std::int64_t> prompt_ids{Vocabulary::kBos};
    if (!args.inst.empty()) {
        prompt_ids.push_back(Vocabulary::kInst);
        for (std::int64_t id : encode_with_warnings(vocab, args.inst)) prompt_ids.push_back(id);
        prompt_ids.push_back(Vocabulary::kAns);
    } else {
        for (std::int64_t id : encode_with_warnings(vocab, args.prompt)) prompt_ids.push_back(id);
    }

    GenerateOptions options;
    options.mode = args.topk > 0 ? GenerateOptions::Mode::TopK : GenerateOptions::Mode::Greedy;
    options.k = args.topk > 0 ? args.topk : options.k;
    options.seed = args.seed;
    options.eos_id = Vocabulary::kEos;

    auto produced = generate(image, prompt_ids, params, cfg, args.max_new, options);
    if (!produced.empty() && produced.back() == Vocabulary::kEos) produced.pop_back();
    // The model's logit row covers the full configured vocab; ids past the
    // actual word list render as <unk>.
    std::int64_t clamped = 0;
    for (auto& id : produced)
        if (id < 0 || id >= vocab.size()) {
            id = Vocabulary::kUnk;
            ++clamped;
        }
    if (clamped > 0)
        std::cerr << "warning: " << clamped << " generated ids outside the vocabulary\n";
    std::cout << vocab.decode(produced) << "\n";
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred;
    std::string refs;
    std::string metrics = "bleu,rouge,cider";
    std::string out;
};

std::vector<std::string> parse_metric_list(const std::string& spec) {
    std::vector<std::string> names;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        while (!item.empty() && item.front() == ' ') item.erase(item.begin());
        while (!item.empty() && item.back() == ' ') item.pop_back();
        if (item.empty()) continue;
        if (item != "bleu" && item != "rouge" && item != "cider")
            throw UsageError("unknown metric '" + item + "' (valid: bleu, rouge, cider)");
        names.push_back(item);
    }
    if (names.empty()) throw UsageError("--metrics selected nothing (valid: bleu, rouge, cider)");
    return names;
}

std::vector<std::pair<std::string, json>> read_jsonl_records(const std::string& path,
                                                             const char* what,
                                                             const char* payload_key) {
    require_file(path, what);
    std::ifstream in(path);
    std::vector<std::pair<std::string, json>> records;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(std::string(what) + " " + path + ":" +
                                     std::to_string(line_no) + ": " + e.what());
        }
        if (!record.contains("image_id") || !record.contains(payload_key))
            throw std::runtime_error(std::string(what) + " " + path + ":" +
                                     std::to_string(line_no) + ": needs image_id and " +
                                     payload_key);
        records.emplace_back(record["image_id"].dump(), record[payload_key]);
    }
    return records;
}

void cmd_eval(const EvalArgs& args) {
    const auto names = parse_metric_list(args.metrics);
    const auto preds = read_jsonl_records(args.pred, "predictions", "caption");
    const auto ref_records = read_jsonl_records(args.refs, "references", "captions");

    std::map<std::string, std::vector<std::vector<std::string>>> refs_by_id;
    for (const auto& [id, captions] : ref_records) {
        auto& lists = refs_by_id[id];
        for (const auto& c : captions) lists.push_back(tokenize_words(c.get<std::string>()));
    }

    std::vector<EvalPair> pairs;
    for (const auto& [id, caption] : preds) {
        const auto it = refs_by_id.find(id);
        if (it == refs_by_id.end())
            throw std::runtime_error("no references for image_id " + id);
        pairs.push_back(EvalPair{tokenize_words(caption.get<std::string>()), it->second});
    }
    if (pairs.empty()) throw std::runtime_error("predictions file has no records");

    std::vector<std::pair<std::string, double>> rows;
    for (const auto& name : names) {
        if (name == "bleu") {
            for (int n = 1; n <= 4; ++n)
                rows.emplace_back("bleu_" + std::to_string(n), bleu(pairs, n));
        } else if (name == "rouge") {
            rows.emplace_back("rouge_l", rouge_l(pairs));
        } else {
            rows.emplace_back("cider", cider(pairs));
        }
    }

    std::string csv = "metric,value\n";
    for (const auto& [name, value] : rows) {
        std::printf("%-8s %.4f\n", name.c_str(), value);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", value);
        csv += name + "," + buf + "\n";
    }
    const std::string out = args.out.empty() ? default_out_dir() + "/metrics.csv" : args.out;
    atomic_write_text(out, csv);
}

// ---------------------------------------------------------------------------
// mask-dump

struct MaskDumpArgs {
    std::string layout;
    std::string kind;
    std::string out;
};

SegmentLayout parse_layout(const std::string& spec) {
    std::vector<Segment> segments;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos)
            throw UsageError("bad layout entry '" + item + "' (want kind:length)");
        const std::string kind = item.substr(0, colon);
        SegmentKind sk;
        if (kind == "image")
            sk = SegmentKind::Image;
        else if (kind == "text")
            sk = SegmentKind::Text;
        else if (kind == "pad")
            sk = SegmentKind::Pad;
        else
            throw UsageError("unknown segment kind '" + kind + "' (valid: image, text, pad)");
        std::int64_t length = 0;
        try {
            length = std::stoll(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw UsageError("bad length in layout entry '" + item + "'");
        }
        if (length <= 0) throw UsageError("bad length in layout entry '" + item + "'");
        segments.push_back(Segment{sk, length});
    }
    if (segments.empty()) throw UsageError("empty --layout");
    return SegmentLayout::of(segments);
}

void cmd_mask_dump(const MaskDumpArgs& args) {
    const SegmentLayout layout = parse_layout(args.layout);
    MaskKind kind;
    try {
        kind = mask_kind_from_name(args.kind);
    } catch (const std::invalid_argument&) {
        throw UsageError("unknown mask kind '" + args.kind +
                         "' (valid: full_bidirectional, image_bidi_text_causal, causal_baseline, "
                         "interleaved_a, interleaved_b)");
    }
    const MaskMatrix mask = build_mask(layout, kind);

    std::string csv = "i\\j";
    for (std::int64_t j = 0; j < mask.n; ++j) csv += "," + std::to_string(j);
    csv += "\n";
    for (std::int64_t i = 0; i < mask.n; ++i) {
        csv += std::to_string(i);
        for (std::int64_t j = 0; j < mask.n; ++j) csv += mask.at(i, j) ? ",1" : ",0";
        csv += "\n";
    }
    if (args.out.empty())
        std::cout << csv;
    else
        atomic_write_text(args.out, csv);
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckArgs {
    std::string preset = "desk";
    std::uint64_t seed = 0;
    std::int64_t samples = 8;
    bool inject_gelu_fault = false;
};

int cmd_gradcheck(const GradCheckArgs& args) {
    const VLMConfig cfg = preset_config(args.preset);
    if (args.samples < 0) throw UsageError("--samples must be >= 0 (0 checks every element)");

    testing::set_gelu_grad_fault(args.inject_gelu_fault);
    const GradCheckReport report = gradcheck_model(cfg, args.seed, args.samples);
    testing::set_gelu_grad_fault(false);

    std::printf("checked %lld elements across %zu leaves\n",
                static_cast<long long>(report.elements_checked), report.leaves.size());
    const char* labels[] = {"vision", "projector", "language"};
    for (Component c : {Component::Vision, Component::Projector, Component::Language}) {
        const LeafGradStat* worst = report.worst_of(c);
        if (worst != nullptr)
            std::printf("%-9s worst %-32s rel %.3e\n", labels[static_cast<int>(c)],
                        worst->name.c_str(), worst->max_rel_err);
    }
    std::printf("max_rel_err %.3e at %s\n", report.max_rel_err, report.worst_leaf.c_str());

    if (report.max_rel_err > kGradCheckThreshold) {
        std::cerr << "gradient check failed: " << report.max_rel_err << " above threshold "
                  << kGradCheckThreshold << "\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// compare-loss

struct CompareLossArgs {
    std::string ckpt;
    std::string corpus_a;
    std::string corpus_b;
    std::string vocab_path;
    std::string out;
};

void cmd_compare_loss(const CompareLossArgs& args) {
    require_file(args.ckpt, "checkpoint");
    auto [cfg, params] = load_checkpoint(args.ckpt);
    const Vocabulary vocab = load_vocab_for(args.vocab_path, args.ckpt, cfg);

    require_file(args.corpus_a, "corpus-a");
    require_file(args.corpus_b, "corpus-b");
    const auto a = load_jsonl(args.corpus_a, parent_of(args.corpus_a), cfg);
    const auto b = load_jsonl(args.corpus_b, parent_of(args.corpus_b), cfg);

    const double ce_a = corpus_mean_ce(a, vocab, params, cfg);
    const double ce_b = corpus_mean_ce(b, vocab, params, cfg);
    const double difference = ce_b - ce_a;

    std::printf("corpus_a mean_ce %.17g\n", ce_a);
    std::printf("corpus_b mean_ce %.17g\n", ce_b);
    std::printf("difference %.17g\n", difference);

    char buf[256];
    std::string csv = "name,path,mean_ce\n";
    std::snprintf(buf, sizeof(buf), "corpus_a,%s,%.17g\n", args.corpus_a.c_str(), ce_a);
    csv += buf;
    std::snprintf(buf, sizeof(buf), "corpus_b,%s,%.17g\n", args.corpus_b.c_str(), ce_b);
    csv += buf;
    std::snprintf(buf, sizeof(buf), "difference,,%.17g\n", difference);
    csv += buf;
    const std::string out = args.out.empty() ? default_out_dir() + "/compare_loss.csv" : args.out;
    atomic_write_text(out, csv);
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string out;
    std::int64_t count = 32;
    std::uint64_t seed = 0;
    bool vqa = false;
    std::int64_t image_size = 32;
    std::int64_t grid = 2;
};

void cmd_synth(const SynthArgs& args) {
    if (args.count <= 0) throw UsageError("--count must be positive");

    SyntheticShapesSpec spec;
    if (args.image_size != spec.image_size || args.grid != spec.grid) {
        spec.image_size = args.image_size;
        spec.grid = args.grid;
        const std::int64_t cell = args.grid > 0 ? args.image_size / args.grid : 0;
        spec.large_radius = cell * 3 / 8;
        spec.small_radius = std::max<std::int64_t>(1, spec.large_radius / 2);
    }

    const auto samples = args.vqa ? render_synthetic_vqa(spec, args.count, args.seed)
                                  : render_synthetic(spec, args.count, args.seed);

    std::filesystem::create_directories(args.out + "/images");
    std::string jsonl;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char rel[64];
        std::snprintf(rel, sizeof(rel), "images/%04zu.ppm", i);
        save_ppm(args.out + "/" + rel, samples[i].image);
        json record{{"image", rel}};
        if (samples[i].is_conversation()) {
            json turns = json::array();
            for (const auto& t : samples[i].turns)
                turns.push_back(json{{"instruction", t.instruction}, {"answer", t.answer}});
            record["turns"] = turns;
        } else {
            record["caption"] = samples[i].caption;
        }
        jsonl += record.dump() + "\n";
    }
    atomic_write_text(args.out + "/data.jsonl", jsonl);
    std::cerr << "wrote " << samples.size() << " samples under " << args.out << "\n";
    std::cout << args.out << "/data.jsonl\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vision-language pipeline: staged training, generation, evaluation"};
    app.require_subcommand(1);
    int rc = 0;

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--stage", train_args.stage, "stage number")->required()->check(CLI::Range(0, 3));
    train->add_option("--config", train_args.config_path, "JSON config file (flags win over it)");
    train->add_option("--data", train_args.data, "dataset JSONL");
    train->add_option("--image-root", train_args.image_root,
                      "directory image paths are relative to (default: the dataset's directory)");
    train->add_option("--out", train_args.out, "output directory (default: $VLM_OUT_DIR or .)");
    train->add_option("--seed", train_args.seed, "run seed");
    train->add_option("--vocab", train_args.vocab_path,
                      "vocabulary file (default: built from the corpus)");
    train->add_option("--resume", train_args.resume, "checkpoint to continue from");
    train->add_option("--preset", train_args.preset, "model/recipe preset: desk or full");
    train->add_option("--epochs", train_args.epochs, "override stage epochs");
    train->add_option("--global-batch", train_args.global_batch, "override global batch");
    train->add_option("--micro-batch", train_args.micro_batch, "override micro batch");
    train->add_option("--lr-vision", train_args.lr_vision, "override vision peak LR");
    train->add_option("--lr-projector", train_args.lr_projector, "override projector peak LR");
    train->add_option("--lr-language", train_args.lr_language, "override language peak LR");
    train->add_option("--noise-rate", train_args.noise_rate, "override stage-0 noise rate");
    train->add_option("--min-lr", train_args.min_lr, "override schedule floor");
    train->add_option("--clip-norm", train_args.clip_norm, "override gradient clip norm");
    train->callback([&] { cmd_train(train_args); });

    GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate", "decode from a trained checkpoint");
    gen->add_option("--ckpt", gen_args.ckpt, "checkpoint")->required();
    gen->add_option("--image", gen_args.image, "PPM image")->required();
    gen->add_option("--prompt", gen_args.prompt, "caption-style prefix text");
    gen->add_option("--inst", gen_args.inst, "instruction text (conversation-style prompt)");
    gen->add_option("--max-new", gen_args.max_new, "token budget")->required();
    gen->add_option("--topk", gen_args.topk, "sample from the top k (default: greedy)");
    gen->add_option("--seed", gen_args.seed, "sampling seed");
    gen->add_option("--vocab", gen_args.vocab_path,
                    "vocabulary file (default: vocab.txt next to the checkpoint)");
    gen->callback([&] { cmd_generate(gen_args); });

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "score predictions against references");
    eval->add_option("--pred", eval_args.pred, "predictions JSONL (image_id, caption)")->required();
    eval->add_option("--refs", eval_args.refs, "references JSONL (image_id, captions)")->required();
    eval->add_option("--metrics", eval_args.metrics, "comma list of bleu, rouge, cider");
    eval->add_option("--out", eval_args.out, "CSV path (default: metrics.csv in $VLM_OUT_DIR or .)");
    eval->callback([&] { cmd_eval(eval_args); });

    MaskDumpArgs mask_args;
    auto* mask = app.add_subcommand("mask-dump", "write an attention mask as 0/1 CSV");
    mask->add_option("--layout", mask_args.layout, "segments, e.g. image:2,text:2")->required();
    mask->add_option("--kind", mask_args.kind, "mask kind name")->required();
    mask->add_option("--out", mask_args.out, "CSV path (default: stdout)");
    mask->callback([&] { cmd_mask_dump(mask_args); });

    GradCheckArgs grad_args;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every gradient leaf");
    grad->add_option("--preset", grad_args.preset, "model preset: desk or full");
    grad->add_option("--seed", grad_args.seed, "probe seed");
    grad->add_option("--samples", grad_args.samples, "elements per leaf (0 = all)");
    grad->add_flag("--inject-gelu-fault", grad_args.inject_gelu_fault)->group("");
    grad->callback([&] { rc = cmd_gradcheck(grad_args); });

    CompareLossArgs cmp_args;
    auto* cmp = app.add_subcommand("compare-loss", "mean corpus CE under one model, a vs b");
    cmp->add_option("--ckpt", cmp_args.ckpt, "checkpoint")->required();
    cmp->add_option("--corpus-a", cmp_args.corpus_a, "baseline corpus JSONL")->required();
    cmp->add_option("--corpus-b", cmp_args.corpus_b, "comparison corpus JSONL")->required();
    cmp->add_option("--vocab", cmp_args.vocab_path,
                    "vocabulary file (default: vocab.txt next to the checkpoint)");
    cmp->add_option("--out", cmp_args.out,
                    "CSV path (default: compare_loss.csv in $VLM_OUT_DIR or .)");
    cmp->callback([&] { cmd_compare_loss(cmp_args); });

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "materialize a synthetic shapes corpus");
    synth->add_option("--out", synth_args.out, "output directory")->required();
    synth->add_option("--count", synth_args.count, "number of samples");
    synth->add_option("--seed", synth_args.seed, "enumeration shuffle seed");
    synth->add_flag("--vqa", synth_args.vqa, "two-turn conversations instead of captions");
    synth->add_option("--image-size", synth_args.image_size, "square image side");
    synth->add_option("--grid", synth_args.grid, "placement cells per side");
    synth->callback([&] { cmd_synth(synth_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
