#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlm/training.hpp"

using namespace vlm;

namespace {

VLMConfig tiny_cfg() {
    VLMConfig cfg;
    cfg.vision = {8, 4, 8, 1, 2, 2.0};
    cfg.decoder = {8, 16, 1, 2, 1, 32, 32};
    cfg.validate();
    return cfg;
}

SyntheticShapesSpec tiny_shapes() {
    SyntheticShapesSpec s;
    s.image_size = 8;
    s.grid = 1;
    s.large_radius = 3;
    s.small_radius = 1;
    s.shapes = {"circle"};
    s.colors = {"red", "green"};
    s.sizes = {"small", "large"};
    return s;
}

std::map<std::string, std::vector<double>> snapshot(VLMParams& params) {
    std::map<std::string, std::vector<double>> out;
    for_each_param(params, [&](const std::string& name, Component, Tensor& leaf) {
        out[name].assign(leaf.data().begin(), leaf.data().end());
    });
    return out;
}

double max_rel_diff(const std::map<std::string, std::vector<double>>& a,
                    const std::map<std::string, std::vector<double>>& b) {
    double worst = 0.0;
    for (const auto& [name, va] : a) {
        const auto& vb = b.at(name);
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double d = std::abs(va[i] - vb[i]) / (std::abs(vb[i]) + 1e-12);
            worst = std::max(worst, d);
        }
    }
    return worst;
}

// every leaf of the stage's trainable components gets a zero grad buffer so
// optimizer preconditions hold even where backward left no gradient
void ensure_grads(VLMParams& params) {
    for_each_param(params, [](const std::string&, Component, Tensor& leaf) {
        if (leaf.requires_grad() && !leaf.has_grad()) {
            std::vector<double> zeros(static_cast<std::size_t>(leaf.numel()), 0.0);
            leaf.accumulate_grad(zeros);
        }
    });
}

}  // namespace

TEST_CASE("published stage recipes") {
    const StageConfig s0 = stage_defaults(0);
    CHECK(s0.mask_kind == MaskKind::FullBidirectional);
    CHECK(s0.noise_rate == 0.2);
    CHECK(s0.lr_vision == 0.0);
    CHECK(s0.lr_projector == 1e-3);
    CHECK(s0.lr_language == 0.0);
    CHECK(s0.global_batch == 128);
    CHECK(s0.frozen(Component::Vision));
    CHECK(s0.frozen(Component::Language));
    CHECK_FALSE(s0.frozen(Component::Projector));
    CHECK_NOTHROW(s0.validate());

    const StageConfig s1 = stage_defaults(1);
    CHECK(s1.mask_kind == MaskKind::ImageBidiTextCausal);
    CHECK(s1.noise_rate == 0.0);
    CHECK(s1.lr_projector == 1e-3);
    CHECK(s1.frozen(Component::Vision));

    const StageConfig s2 = stage_defaults(2);
    CHECK(s2.lr_vision == 5e-6);
    CHECK(s2.lr_projector == 2e-3);
    CHECK(s2.lr_language == 2e-5);
    CHECK_FALSE(s2.frozen(Component::Vision));

    const StageConfig s3 = stage_defaults(3);
    CHECK(s3.lr_projector == 1e-4);
    CHECK(s3.lr_language == 2e-5);
    CHECK_NOTHROW(s3.validate());
    CHECK_THROWS_AS(stage_defaults(4), std::invalid_argument);

    for (int s = 0; s < 4; ++s) {
        const StageConfig desk = desk_stage_defaults(s);
        CHECK(desk.global_batch == 32);
        CHECK(desk.micro_batch == 8);
        CHECK(desk.clip_norm == 1.0);
        CHECK_NOTHROW(desk.validate());
    }
}

TEST_CASE("stage config invariants reject contradictions") {
    StageConfig s = stage_defaults(0);
    s.mask_kind = MaskKind::CausalBaseline;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(0);
    s.noise_rate = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(0);
    s.lr_language = 1e-4;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(1);
    s.noise_rate = 0.2;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(2);
    s.global_batch = 30;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(2);
    s.epochs = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(2);
    s.clip_norm = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);

    s = stage_defaults(2);
    s.stage = 7;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("cosine schedule endpoints are exact") {
    ScheduleState s;
    s.total_steps = 100;
    s.min_lr = 1e-8;

    s.step = 0;
    CHECK(cosine_lr(s, 1e-3) == 1e-3);
    s.step = 100;
    CHECK(cosine_lr(s, 1e-3) == 1e-8);
    s.step = 50;
    CHECK(cosine_lr(s, 1e-3) == doctest::Approx((1e-3 + 1e-8) / 2).epsilon(1e-9));

    double prev = 1e9;
    for (std::int64_t t = 0; t <= 100; ++t) {
        s.step = t;
        const double lr = cosine_lr(s, 1e-3);
        CHECK(lr <= prev);
        prev = lr;
    }

    s.step = 101;
    CHECK_THROWS_AS(cosine_lr(s, 1e-3), std::invalid_argument);
    s.step = -1;
    CHECK_THROWS_AS(cosine_lr(s, 1e-3), std::invalid_argument);
    s.step = 0;
    s.total_steps = 0;
    CHECK_THROWS_AS(cosine_lr(s, 1e-3), std::invalid_argument);

    ScheduleState trip{25, 100, 4e-4, 8e-4, 2e-5, 1e-8};
    const ComponentLRs lrs = schedule_lrs(trip);
    CHECK(lrs.vision == cosine_lr(trip, 4e-4));
    CHECK(lrs.projector == cosine_lr(trip, 8e-4));
    CHECK(lrs.language == cosine_lr(trip, 2e-5));
    CHECK(lrs.of(Component::Vision) == lrs.vision);
    CHECK(lrs.of(Component::Language) == lrs.language);
}

TEST_CASE("input noising hits the exact quota of distinct positions") {
    const std::vector<std::int64_t> ids = {1, 10, 11, 12, 13, 14, 15, 16, 17, 18};

    auto [noised, labels] = noise_input(ids, 0.2, 99);
    CHECK(labels == ids);
    int replaced = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (noised[i] != ids[i]) {
            CHECK(noised[i] == Vocabulary::kNoise);
            ++replaced;
        }
    }
    CHECK(replaced == 2);

    auto [quarter, q_labels] = noise_input(ids, 0.25, 99);  // round(2.5) = 3
    int q_replaced = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) q_replaced += quarter[i] != ids[i];
    CHECK(q_replaced == 3);

    CHECK(noise_input(ids, 0.0, 1).first == ids);
    auto [all, all_labels] = noise_input(ids, 1.0, 1);
    for (std::int64_t id : all) CHECK(id == Vocabulary::kNoise);
    CHECK(all_labels == ids);

    CHECK(noise_input(ids, 0.2, 99).first == noised);
    bool seed_matters = false;
    for (std::uint64_t seed = 0; seed < 8 && !seed_matters; ++seed) {
        seed_matters = noise_input(ids, 0.2, seed).first != noised;
    }
    CHECK(seed_matters);

    CHECK_THROWS_AS(noise_input(ids, 1.2, 0), std::invalid_argument);
    CHECK_THROWS_AS(noise_input(ids, -0.1, 0), std::invalid_argument);
}

TEST_CASE("gradient clipping scales by the global norm") {
    const VLMConfig cfg = tiny_cfg();
    RandomSource rng(3);
    VLMParams params = VLMParams::init(cfg, rng);

    std::vector<double> g(static_cast<std::size_t>(params.projector.w1.numel()), 0.0);
    g[0] = 10.0;
    params.projector.w1.accumulate_grad(g);

    CHECK(clip_grad_norm(params, 1.0) == 0.1);
    CHECK(params.projector.w1.grad()[0] == doctest::Approx(1.0).epsilon(1e-12));

    params.projector.w1.zero_grad();
    g[0] = 0.5;
    params.projector.w1.accumulate_grad(g);
    CHECK(clip_grad_norm(params, 1.0) == 1.0);
    CHECK(params.projector.w1.grad()[0] == 0.5);

    // two leaves: norm = sqrt(3^2 + 4^2) = 5
    params.projector.w1.zero_grad();
    g[0] = 3.0;
    params.projector.w1.accumulate_grad(g);
    std::vector<double> g2(static_cast<std::size_t>(params.projector.b1.numel()), 0.0);
    g2[1] = 4.0;
    params.projector.b1.accumulate_grad(g2);
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(0.2).epsilon(1e-12));
    double post = 0.0;
    post += params.projector.w1.grad()[0] * params.projector.w1.grad()[0];
    post += params.projector.b1.grad()[1] * params.projector.b1.grad()[1];
    CHECK(std::sqrt(post) == doctest::Approx(1.0).epsilon(1e-9));

    params.projector.w1.zero_grad();
    g[0] = std::numeric_limits<double>::quiet_NaN();
    params.projector.w1.accumulate_grad(g);
    CHECK_THROWS_AS(clip_grad_norm(params, 1.0), std::runtime_error);
}

TEST_CASE("adamw single step matches the hand-evaluated update") {
    const VLMConfig cfg = tiny_cfg();
    RandomSource rng(3);
    VLMParams params = VLMParams::init(cfg, rng);
    for_each_param(params, [](const std::string&, Component, Tensor& leaf) {
        for (double& x : leaf.raw_data()) x = 0.0;
    });
    ensure_grads(params);

    params.projector.b1.raw_data()[0] = 1.0;
    params.projector.b1.grad_mut()[0] = 1.0;

    OptimizerState opt;
    adamw_step(params, opt, {0.0, 0.1, 0.0});
    CHECK(opt.step == 1);
    const double expected = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(params.projector.b1.at(0) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(params.projector.b1.at(0) == doctest::Approx(0.899000001).epsilon(1e-9));
    // zero-gradient zero-value entries stay put
    CHECK(params.projector.b1.at(1) == 0.0);
}

TEST_CASE("adamw freezing, decay-only motion, and state bookkeeping") {
    const VLMConfig cfg = tiny_cfg();
    RandomSource rng(4);
    VLMParams params = VLMParams::init(cfg, rng);
    apply_freezing(params, stage_defaults(1));  // projector only
    ensure_grads(params);

    const auto before = snapshot(params);
    OptimizerState opt;

    SUBCASE("frozen components are untouched and get no state") {
        params.projector.w1.grad_mut()[0] = 1.0;
        adamw_step(params, opt, {0.0, 1e-3, 0.0});
        const auto after = snapshot(params);
        for (const auto& [name, values] : after) {
            if (name.rfind("projector.", 0) == 0) continue;
            CHECK(values == before.at(name));
        }
        CHECK(after.at("projector.w1") != before.at("projector.w1"));
        for (const auto& [name, buf] : opt.m) {
            CHECK(name.rfind("projector.", 0) == 0);
            CHECK(buf.size() == before.at(name).size());
        }
        CHECK(opt.m.count("language.head") == 0);
        CHECK(opt.m.count("vision.patch_weight") == 0);
    }

    SUBCASE("zero grad and zero decay leave values bitwise") {
        AdamWConfig acfg;
        acfg.weight_decay = 0.0;
        adamw_step(params, opt, {0.0, 1e-3, 0.0}, acfg);
        CHECK(snapshot(params) == before);
    }

    SUBCASE("pure decay scales by 1 - lr wd") {
        const double w0 = params.projector.w2.at(0, 0);
        adamw_step(params, opt, {0.0, 0.1, 0.0});
        CHECK(params.projector.w2.at(0, 0) == doctest::Approx(w0 * 0.999).epsilon(1e-12));
    }

    SUBCASE("missing gradient on a trainable leaf is an error") {
        params.projector.w1.zero_grad();
        CHECK_THROWS_AS(adamw_step(params, opt, {0.0, 1e-3, 0.0}), std::invalid_argument);
    }
}

TEST_CASE("stage-0 forward at init: loss near ln(vocab), gradient reaches the projector") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);
    RandomSource rng(7);
    VLMParams params = VLMParams::init(cfg, rng);
    const StageConfig stage{0, MaskKind::FullBidirectional, 0.0, 2e-3, 0.0,
                            0.2, 1, 4, 2, 1e-8, 1.0};
    apply_freezing(params, stage);

    const Batch batch = build_batch(samples, 0, vocab, cfg, 21);
    Graph graph;
    const Tensor loss = forward_batch(batch, params, cfg, stage);
    graph.backward(loss);

    const double uniform = std::log(static_cast<double>(cfg.decoder.vocab));
    CHECK(std::abs(loss.value() - uniform) / uniform < 0.1);

    double proj_norm = 0.0;
    for_each_param(params, [&](const std::string&, Component c, Tensor& leaf) {
        if (c == Component::Projector) {
            REQUIRE(leaf.has_grad());
            for (double gv : leaf.grad()) proj_norm += gv * gv;
        } else {
            CHECK_FALSE(leaf.has_grad());
        }
    });
    CHECK(proj_norm > 0.0);

    // noising actually noised: the packed input the loss saw is not
    // reproducible from the clean ids alone, so check via noise_input
    const auto text = batch.text_ids(0);
    std::vector<std::int64_t> real(text.begin(), text.begin() + 9);
    int hit = 0;
    for (std::uint64_t salt = 0; salt < 1; ++salt) {
        auto [noised, labels] = noise_input(real, 0.2, RandomSource(batch.seed).fork(0).next_u64());
        for (std::size_t i = 0; i < real.size(); ++i) hit += noised[i] != real[i];
    }
    CHECK(hit == 2);  // round(0.2 * 9)
}

TEST_CASE("full stage runs freeze exactly the advertised components") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);

    for (int stage_id : {0, 1}) {
        RandomSource rng(7);
        VLMParams params = VLMParams::init(cfg, rng);
        const auto before = snapshot(params);

        StageConfig stage = desk_stage_defaults(stage_id);
        stage.global_batch = 4;
        stage.micro_batch = 2;
        stage.epochs = 2;
        const StageResult result = run_stage(samples, vocab, params, cfg, stage, 31);
        CHECK(result.curve.size() == 2);

        const auto after = snapshot(params);
        bool projector_moved = false;
        for (const auto& [name, values] : after) {
            if (name.rfind("projector.", 0) == 0) {
                projector_moved = projector_moved || values != before.at(name);
            } else {
                CHECK(values == before.at(name));  // bitwise frozen
            }
        }
        CHECK(projector_moved);
    }
}

TEST_CASE("stage-2 run moves all three components") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);
    RandomSource rng(7);
    VLMParams params = VLMParams::init(cfg, rng);
    const auto before = snapshot(params);

    StageConfig stage = desk_stage_defaults(2);
    stage.global_batch = 4;
    stage.micro_batch = 2;
    const StageResult result = run_stage(samples, vocab, params, cfg, stage, 31);
    CHECK(result.curve.size() == 1);

    const auto after = snapshot(params);
    bool vision_moved = false, projector_moved = false, language_moved = false;
    for (const auto& [name, values] : after) {
        const bool moved = values != before.at(name);
        if (name.rfind("vision.", 0) == 0) vision_moved = vision_moved || moved;
        if (name.rfind("projector.", 0) == 0) projector_moved = projector_moved || moved;
        if (name.rfind("language.", 0) == 0) language_moved = language_moved || moved;
    }
    CHECK(vision_moved);
    CHECK(projector_moved);
    CHECK(language_moved);
}

TEST_CASE("gradient accumulation is equivalent to the full batch") {
    const VLMConfig cfg = tiny_cfg();
    const auto caps = render_synthetic(tiny_shapes(), 4, 11);
    const auto vqa = render_synthetic_vqa(tiny_shapes(), 4, 11);
    Vocabulary vocab = vocab_from_corpus(caps, cfg.decoder.vocab);
    for (const auto& s : vqa)
        for (const auto& t : s.turns)
            for (const auto& w : tokenize_words(t.instruction + " " + t.answer)) vocab.add_word(w);

    const StageConfig stages[] = {
        {0, MaskKind::FullBidirectional, 0.0, 2e-3, 0.0, 0.2, 1, 4, 2, 1e-8, 1.0},
        {2, MaskKind::ImageBidiTextCausal, 1e-3, 2e-3, 1e-3, 0.0, 1, 4, 2, 1e-8, 1.0},
        {3, MaskKind::ImageBidiTextCausal, 1e-4, 5e-4, 5e-4, 0.0, 1, 4, 2, 1e-8, 1.0},
    };
    for (const StageConfig& stage : stages) {
        CAPTURE(stage.stage);
        const auto& data = stage.stage == 3 ? vqa : caps;
        const std::uint64_t seed = 17;

        RandomSource r1(5);
        VLMParams whole = VLMParams::init(cfg, r1);
        apply_freezing(whole, stage);
        OptimizerState opt1;
        const Batch full = build_batch(data, stage.stage, vocab, cfg, seed);
        const ComponentLRs lrs{stage.lr_vision, stage.lr_projector, stage.lr_language};
        const double full_loss = accumulate_and_step({full}, whole, opt1, cfg, stage, lrs);

        RandomSource r2(5);
        VLMParams split = VLMParams::init(cfg, r2);
        apply_freezing(split, stage);
        OptimizerState opt2;
        const Batch m0 = build_batch({data[0], data[1]}, stage.stage, vocab, cfg, seed, {0, 1});
        const Batch m1 = build_batch({data[2], data[3]}, stage.stage, vocab, cfg, seed, {2, 3});
        const double split_loss = accumulate_and_step({m0, m1}, split, opt2, cfg, stage, lrs);

        CHECK(full_loss == doctest::Approx(split_loss).epsilon(1e-12));
        CHECK(max_rel_diff(snapshot(whole), snapshot(split)) < 1e-9);
    }
}

TEST_CASE("single micro batch path equals a plain step, loss is the micro mean") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);
    const StageConfig stage{1, MaskKind::ImageBidiTextCausal, 0.0, 2e-3, 0.0,
                            0.0, 1, 4, 4, 1e-8, 1.0};
    const ComponentLRs lrs{0.0, 2e-3, 0.0};
    const Batch batch = build_batch(samples, 1, vocab, cfg, 3);

    RandomSource r1(5);
    VLMParams manual = VLMParams::init(cfg, r1);
    apply_freezing(manual, stage);
    {
        Graph graph;
        const Tensor loss = forward_batch(batch, manual, cfg, stage);
        graph.backward(loss);
    }
    clip_grad_norm(manual, stage.clip_norm);
    OptimizerState opt1;
    adamw_step(manual, opt1, lrs);

    RandomSource r2(5);
    VLMParams accum = VLMParams::init(cfg, r2);
    apply_freezing(accum, stage);
    OptimizerState opt2;

    const Batch m0 = build_batch({samples[0], samples[1]}, 1, vocab, cfg, 3, {0, 1});
    const Batch m1 = build_batch({samples[2], samples[3]}, 1, vocab, cfg, 3, {2, 3});
    const double l0 = forward_stage(m0, accum, cfg).value();
    const double l1 = forward_stage(m1, accum, cfg).value();
    const double reported = accumulate_and_step({m0, m1}, accum, opt2, cfg, stage, lrs);
    CHECK(reported == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));

    RandomSource r3(5);
    VLMParams single = VLMParams::init(cfg, r3);
    apply_freezing(single, stage);
    OptimizerState opt3;
    accumulate_and_step({batch}, single, opt3, cfg, stage, lrs);
    CHECK(snapshot(manual) == snapshot(single));

    CHECK_THROWS_AS(accumulate_and_step({}, single, opt3, cfg, stage, lrs),
                    std::invalid_argument);
}

TEST_CASE("stage runner: curve shape, determinism, decreasing smoke loss") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 5, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);

    StageConfig stage = desk_stage_defaults(0);
    stage.global_batch = 2;
    stage.micro_batch = 2;
    stage.epochs = 10;  // 10 * ceil(5/2) = 30 steps

    RandomSource r1(7);
    VLMParams a = VLMParams::init(cfg, r1);
    const StageResult ra = run_stage(samples, vocab, a, cfg, stage, 99);
    REQUIRE(ra.curve.size() == 30);
    CHECK(ra.curve.front().step == 0);
    CHECK(ra.curve.back().step == 29);
    CHECK(ra.curve.front().lr_projector == stage.lr_projector);  // peak at step 0
    CHECK(ra.curve.back().lr_projector < stage.lr_projector);
    CHECK(ra.curve.front().lr_vision == 0.0);
    for (const StepRecord& r : ra.curve) CHECK(std::isfinite(r.loss));

    // loss falls over the run (first- vs last-five average)
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 5; ++i) {
        head += ra.curve[static_cast<std::size_t>(i)].loss;
        tail += ra.curve[ra.curve.size() - 1 - static_cast<std::size_t>(i)].loss;
    }
    CHECK(tail < head);

    RandomSource r2(7);
    VLMParams b = VLMParams::init(cfg, r2);
    const StageResult rb = run_stage(samples, vocab, b, cfg, stage, 99);
    REQUIRE(rb.curve.size() == ra.curve.size());
    for (std::size_t i = 0; i < ra.curve.size(); ++i) {
        CHECK(ra.curve[i].loss == rb.curve[i].loss);  // bitwise determinism
    }
    CHECK(snapshot(a) == snapshot(b));

    RandomSource r3(7);
    VLMParams c = VLMParams::init(cfg, r3);
    const StageResult rc = run_stage(samples, vocab, c, cfg, stage, 100);
    bool any_diff = false;
    for (std::size_t i = 0; i < rc.curve.size(); ++i) {
        any_diff = any_diff || rc.curve[i].loss != ra.curve[i].loss;
    }
    CHECK(any_diff);

    CHECK_THROWS_AS(run_stage({}, vocab, a, cfg, stage, 1), std::invalid_argument);
}

TEST_CASE("stage runner writes checkpoint and curve csv") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);

    StageConfig stage = desk_stage_defaults(1);
    stage.global_batch = 4;
    stage.micro_batch = 2;
    stage.epochs = 3;

    const std::string ckpt = "test_training_stage.ckpt";
    const std::string csv = "test_training_curve.csv";

    RandomSource r1(7);
    VLMParams params = VLMParams::init(cfg, r1);
    const StageResult result = run_stage(samples, vocab, params, cfg, stage, 5, ckpt, csv);
    REQUIRE(result.curve.size() == 3);

    auto [loaded_cfg, loaded] = load_checkpoint(ckpt);
    CHECK(loaded_cfg.decoder.vocab == cfg.decoder.vocab);
    CHECK(snapshot(loaded) == snapshot(params));

    std::ifstream in(csv);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,lr_vision,lr_projector,lr_language,loss");
    int rows = 0;
    double last_loss = -1.0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string field;
        std::getline(ss, field, ',');
        CHECK(std::stoll(field) == rows);
        for (int f = 0; f < 4; ++f) {
            std::getline(ss, field, ',');
            last_loss = std::stod(field);
        }
        ++rows;
    }
    CHECK(rows == 3);
    // %.17g survives the text round-trip exactly
    CHECK(last_loss == result.curve.back().loss);

    std::remove(ckpt.c_str());
    std::remove(csv.c_str());
}

TEST_CASE("stage-0 alignment lowers the stage-1 starting loss") {
    const VLMConfig cfg = tiny_cfg();
    const auto samples = render_synthetic(tiny_shapes(), 4, 11);
    const Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);

    RandomSource rng(7);
    VLMParams params = VLMParams::init(cfg, rng);

    StageConfig s1 = desk_stage_defaults(1);
    s1.global_batch = 4;
    s1.micro_batch = 4;
    apply_freezing(params, s1);
    const Batch probe = build_batch(samples, 1, vocab, cfg, 0);
    const double before = forward_stage(probe, params, cfg).value();

    StageConfig s0 = desk_stage_defaults(0);
    s0.global_batch = 4;
    s0.micro_batch = 4;
    s0.epochs = 40;
    run_stage(samples, vocab, params, cfg, s0, 13);

    apply_freezing(params, s1);
    const double after = forward_stage(probe, params, cfg).value();
    CHECK(after < before);
}
