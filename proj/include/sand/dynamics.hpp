#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sand/core.hpp"
#include "sand/net.hpp"

namespace sand::dyn {

// Per-level latent state z_i(t) = (c_i, h_i). c_i is the internal state,
// h_i the decaying activity memory. Left-continuous in t: a query at an
// event time excludes that event's jump.
struct NeedState {
    double t = 0.0;
    std::vector<std::vector<double>> c;
    std::vector<std::vector<double>> h;

    int levels() const { return static_cast<int>(c.size()); }
};

// Mirror of NeedState on a tape; used when gradients must flow through
// the unrolled integration.
struct TapeNeedState {
    double t = 0.0;
    std::vector<net::Tape::Var> c;
    std::vector<net::Tape::Var> h;
};

// View over the parameter store plus the fixed wiring. Parameters live
// under "dyn.*"; the struct itself is cheap to copy and immutable during
// generation.
struct DynamicsNets {
    net::ParamStore* store = nullptr;
    int levels = 3;
    int internal_dim = 16;
    int memory_dim = 16;
    int embed_dim = 8;
    int M = 0;
    double delta = 0.1;
    bool scalar_decay = false;
    std::vector<int> level_of;  // type k -> 0-based level index
    net::MlpSpec flow_spec;
    net::MlpSpec decay_spec;
    net::MlpSpec jump_spec;

    std::string flow_prefix(int level) const;
    std::string decay_prefix(int level) const;
    std::string jump_prefix(int level) const;
    std::string embed_name() const;
    std::string z0_c_name(int level) const;
    std::string z0_h_name(int level) const;
};

// Registers all dynamics parameters in the store and returns the wiring.
DynamicsNets make_dynamics(const Config& cfg, const ActivityTaxonomy& tax,
                           net::ParamStore& store, RngStream& rng);

// Wiring over an already-populated store (e.g. a loaded checkpoint).
DynamicsNets attach_dynamics(const Config& cfg, const ActivityTaxonomy& tax,
                             net::ParamStore& store);

NeedState initial_state(const DynamicsNets& nets);

// dc_i/dt and the positive decay rates alpha_i, both evaluated at the
// current state.
std::pair<std::vector<double>, std::vector<double>> flow_derivative(
    const DynamicsNets& nets, int level, const NeedState& state);

using BoundaryFn = std::function<void(double, const NeedState&)>;

// Advances the state from t_from to t_to. Substeps are aligned to the
// global grid anchored at t = 0 (boundaries at integer multiples of
// delta) so that split intervals compose bit-exactly. c uses forward
// Euler, h exponential Euler. on_boundary, when given, is invoked at
// every substep boundary after t_from, t_to included.
NeedState integrate_flow(const DynamicsNets& nets, const NeedState& state,
                         double t_from, double t_to,
                         const BoundaryFn& on_boundary = {});

// Adds the jump of an event of type k to the state: h_i += g_i(embed(k)
// (+) c_i) for the one level i owning k; everything else is returned
// bit-identical.
NeedState apply_jump(const DynamicsNets& nets, const NeedState& state, int k);

// z(t) from the learned z(0), alternating flow and jumps over all events
// with t_i < t.
NeedState replay_state(const DynamicsNets& nets, const ActivitySequence& seq,
                       double t);

// Tape counterparts. Values are bit-identical to the plain path.
TapeNeedState tape_initial_state(net::Tape& tape, const DynamicsNets& nets);

using TapeBoundaryFn = std::function<void(double, const TapeNeedState&)>;

void tape_integrate_flow(net::Tape& tape, const DynamicsNets& nets,
                         TapeNeedState& state, double t_from, double t_to,
                         const TapeBoundaryFn& on_boundary = {});

void tape_apply_jump(net::Tape& tape, const DynamicsNets& nets,
                     TapeNeedState& state, int k);

}  // namespace sand::dyn
