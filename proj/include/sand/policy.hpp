#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sand/core.hpp"
#include "sand/dynamics.hpp"
#include "sand/net.hpp"

namespace sand::policy {

// Maps the concatenated need state (c_1 (+) h_1 (+) ... ) to M positive
// per-type intensities, clamped to [lambda_min, lambda_max]. Parameters
// live under "policy.head".
struct IntensityHead {
    net::ParamStore* store = nullptr;
    int M = 0;
    int levels = 3;
    int state_dim = 0;  // levels * (internal_dim + memory_dim)
    double lambda_min = 1e-6;
    double lambda_max = 50.0;
    double lookahead_hours = 2.0;
    double bound_multiplier = 2.0;
    net::MlpSpec spec;

    std::string prefix() const { return "policy.head"; }
};

IntensityHead make_intensity_head(const Config& cfg, const ActivityTaxonomy& tax,
                                  net::ParamStore& store, RngStream& rng);
IntensityHead attach_intensity_head(const Config& cfg, const ActivityTaxonomy& tax,
                                    net::ParamStore& store);

// Flattened policy input: c_i then h_i per level, levels in order.
std::vector<double> state_vector(const dyn::NeedState& state);

std::vector<double> intensities(const IntensityHead& head, const dyn::NeedState& state);
net::Tape::Var tape_intensities(net::Tape& tape, const IntensityHead& head,
                                const dyn::TapeNeedState& state);

// p(k|t) = lambda_k / sum_j lambda_j.
std::vector<double> type_distribution(const std::vector<double>& lambda);

struct NextEvent {
    double tau = 0.0;  // interval since t_now
    int k = 0;
    double t_abs = 0.0;
};

// Samples the next event by thinning against a piecewise-constant
// envelope built from the delta-grid over a lookahead window. Returns
// nullopt when the horizon is reached first. The candidate time is
// snapped to the grid for intensity evaluation; the emitted time stays
// continuous.
std::optional<NextEvent> sample_next_event(const dyn::DynamicsNets& nets,
                                           const IntensityHead& head,
                                           const dyn::NeedState& state, double t_now,
                                           double horizon_T, RngStream& rng);

struct RolloutRecord {
    std::vector<Event> events;
    std::vector<double> log_prob;           // log p(a_i | s_i) per action
    std::vector<dyn::NeedState> states;     // z(t_i) before the jump
    std::vector<double> reward;             // filled in by adversarial training
    std::vector<double> interval_integral;  // integral of lambda* over (t_{i-1}, t_i]
    double tail_integral = 0.0;             // integral over (t_n, T], 0 when truncated
    bool truncated = false;
};

struct RolloutResult {
    ActivitySequence seq;
    RolloutRecord record;
};

RolloutResult rollout(const dyn::DynamicsNets& nets, const IntensityHead& head,
                      std::int64_t start_ts, double horizon_T, int max_events,
                      RngStream& rng, const std::string& user_id = "gen");

// sum_i log lambda_{k_i}(t_i) - integral_0^T lambda*(s) ds, trapezoid on
// the aligned grid split at event times.
double sequence_log_likelihood(const dyn::DynamicsNets& nets, const IntensityHead& head,
                               const ActivitySequence& seq);

// Same quantity recorded on a tape; value bit-identical to the plain path.
net::Tape::Var tape_sequence_log_likelihood(net::Tape& tape,
                                            const dyn::DynamicsNets& nets,
                                            const IntensityHead& head,
                                            const ActivitySequence& seq);

// Per-action log-probabilities on a tape, for score-function gradients.
std::vector<net::Tape::Var> tape_action_log_probs(net::Tape& tape,
                                                  const dyn::DynamicsNets& nets,
                                                  const IntensityHead& head,
                                                  const ActivitySequence& seq);

}  // namespace sand::policy
