#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sand/core.hpp"

namespace sand::bench {

// Known ground truth for the synthetic corpus: per-type hour-of-day rate
// profiles, global weekday multipliers, and per-type refractory
// suppression 1 - exp(-t/rho) after each event of that type.
struct GroundTruthSpec {
    int n_users = 500;
    double horizon_T = 168.0;
    std::int64_t start_ts = 1474243200;
    std::vector<std::vector<double>> hourly_rate;  // M x 24, per hour of day
    std::vector<double> weekday_mult;              // 7, Monday first
    std::vector<double> refractory_rho;            // M, hours

    void validate(const ActivityTaxonomy& tax) const;
};

GroundTruthSpec parse_ground_truth(const std::string& text, const ActivityTaxonomy& tax);
GroundTruthSpec load_ground_truth(const std::string& path, const ActivityTaxonomy& tax);
std::string serialize_ground_truth(const GroundTruthSpec& spec);

// One user's sequence by thinning against the constant bound
// sum_k max_hour rate_k * max weekday multiplier. Deterministic per
// (seed, user_index); user_index is the RNG stream id.
ActivitySequence generate_sequence(const GroundTruthSpec& spec, int user_index,
                                   std::uint64_t seed);

Corpus generate_corpus(const GroundTruthSpec& spec, int n_users, double horizon_T,
                       std::uint64_t seed);

}  // namespace sand::bench
