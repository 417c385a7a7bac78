#include "vlm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vlm/training.hpp"

namespace vlm {

const LeafGradStat* GradCheckReport::worst_of(Component c) const {
    const LeafGradStat* worst = nullptr;
    for (const LeafGradStat& s : leaves) {
        if (s.component != c || s.checked == 0) continue;
        if (!worst || s.max_rel_err > worst->max_rel_err) worst = &s;
    }
    return worst;
}

namespace {

// fixed two-sample caption batch sized to the config under test
Batch probe_batch(const VLMConfig& cfg, const Vocabulary& vocab,
                  const std::vector<Sample>& samples) {
    return build_batch(samples, 1, vocab, cfg, 0);
}

std::vector<Sample> probe_samples(const VLMConfig& cfg, std::uint64_t seed) {
    SyntheticShapesSpec spec;
    spec.image_size = cfg.vision.image_size;
    spec.grid = 1;
    spec.large_radius = std::max<std::int64_t>(1, cfg.vision.image_size / 4);
    spec.small_radius = std::max<std::int64_t>(1, cfg.vision.image_size / 8);
    spec.shapes = {"circle", "square"};
    spec.colors = {"red", "blue"};
    spec.sizes = {"small", "large"};
    return render_synthetic(spec, 2, seed);
}

}  // namespace

GradCheckReport gradcheck_model(const VLMConfig& cfg, std::uint64_t seed,
                                std::int64_t samples_per_leaf, double h, double atol) {
    if (samples_per_leaf < 0) throw std::invalid_argument("gradcheck: negative samples_per_leaf");
    cfg.validate();

    const auto samples = probe_samples(cfg, seed);
    Vocabulary vocab = vocab_from_corpus(samples, cfg.decoder.vocab);
    const Batch batch = probe_batch(cfg, vocab, samples);

    RandomSource init_rng(seed);
    VLMParams params = VLMParams::init(cfg, init_rng);
    for_each_param(params, [](const std::string&, Component, Tensor& leaf) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    });

    {
        Graph graph;
        const Tensor loss = forward_stage(batch, params, cfg);
        graph.backward(loss);
    }
    auto eval_loss = [&]() { return forward_stage(batch, params, cfg).value(); };

    GradCheckReport report;
    RandomSource pick_rng(seed ^ 0x5bd1e995u);
    for_each_param(params, [&](const std::string& name, Component component, Tensor& leaf) {
        LeafGradStat stat;
        stat.name = name;
        stat.component = component;

        const std::int64_t numel = leaf.numel();
        std::vector<std::int64_t> indices;
        if (samples_per_leaf == 0 || samples_per_leaf >= numel) {
            indices.resize(static_cast<std::size_t>(numel));
            for (std::int64_t i = 0; i < numel; ++i) indices[static_cast<std::size_t>(i)] = i;
        } else {
            // seeded distinct picks via partial shuffle
            std::vector<std::int64_t> order(static_cast<std::size_t>(numel));
            for (std::int64_t i = 0; i < numel; ++i) order[static_cast<std::size_t>(i)] = i;
            RandomSource leaf_rng = pick_rng.fork(static_cast<std::uint64_t>(report.leaves.size()));
            for (std::int64_t i = 0; i < samples_per_leaf; ++i) {
                const std::int64_t j =
                    i + static_cast<std::int64_t>(
                            leaf_rng.next_below(static_cast<std::uint64_t>(numel - i)));
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            }
            indices.assign(order.begin(), order.begin() + samples_per_leaf);
        }

        auto grad = leaf.grad();
        auto data = leaf.raw_data();
        for (std::int64_t idx : indices) {
            const std::size_t i = static_cast<std::size_t>(idx);
            const double saved = data[i];
            data[i] = saved + h;
            const double up = eval_loss();
            data[i] = saved - h;
            const double down = eval_loss();
            data[i] = saved;
            const double central = (up - down) / (2.0 * h);
            const double analytic = grad[i];
            const double rel = std::abs(analytic - central) / (std::abs(central) + atol);
            if (rel > stat.max_rel_err) stat.max_rel_err = rel;
            ++stat.checked;
        }

        if (stat.max_rel_err > report.max_rel_err) {
            report.max_rel_err = stat.max_rel_err;
            report.worst_leaf = name;
        }
        report.elements_checked += stat.checked;
        report.leaves.push_back(std::move(stat));
    });
    return report;
}

}  // namespace vlm
