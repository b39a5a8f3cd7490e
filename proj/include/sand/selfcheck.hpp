#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sand::check {

struct PathCheck {
    std::string path;  // flow, decay, jump, intensity, discriminator
    double max_rel_err = 0.0;
};

// Central-difference validation of the taped gradients through every
// parameter of a small randomized model: the likelihood path covers the
// flow, decay, jump, and intensity networks; a score path covers the
// discriminator (both the empty-history and attention branches).
std::vector<PathCheck> gradient_path_checks(std::uint64_t seed);

}  // namespace sand::check
