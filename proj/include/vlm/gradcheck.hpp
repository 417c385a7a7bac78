#pragma once

// Whole-model gradient verification: analytic gradients from one backward
// pass against central finite differences of the same scalar loss, leaf by
// leaf. samples_per_leaf picks that many elements per leaf (seeded,
// distinct); zero means every element, which is only practical for very
// small configurations.

#include <cstdint>
#include <string>
#include <vector>

#include "vlm/model.hpp"

namespace vlm {

struct LeafGradStat {
    std::string name;
    Component component = Component::Vision;
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_leaf;
    std::vector<LeafGradStat> leaves;         // one entry per leaf, visit order
    std::int64_t elements_checked = 0;

    // Worst leaf within one component; nullptr when none was checked.
    const LeafGradStat* worst_of(Component c) const;
};

GradCheckReport gradcheck_model(const VLMConfig& cfg, std::uint64_t seed,
                                std::int64_t samples_per_leaf, double h = 1e-5,
                                double atol = 1e-6);

}  // namespace vlm
