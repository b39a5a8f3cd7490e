#include "sand/dynamics.hpp"

#include <cmath>
#include <string>

namespace sand::dyn {

namespace {

std::vector<int> build_widths(int in, int hidden, int depth, int out) {
    std::vector<int> widths;
    widths.push_back(in);
    for (int l = 0; l < depth; ++l) {
        widths.push_back(hidden);
    }
    widths.push_back(out);
    return widths;
}

DynamicsNets build_wiring(const Config& cfg, const ActivityTaxonomy& tax,
                          net::ParamStore& store) {
    tax.validate();
    DynamicsNets nets;
    nets.store = &store;
    nets.levels = cfg.levels();
    nets.internal_dim = cfg.internal_dim;
    nets.memory_dim = cfg.memory_dim;
    nets.embed_dim = cfg.activity_embed_dim;
    nets.M = tax.M;
    nets.delta = cfg.delta;
    nets.scalar_decay = cfg.scalar_decay;
    nets.level_of.resize(static_cast<std::size_t>(tax.M));
    for (int k = 0; k < tax.M; ++k) {
        nets.level_of[static_cast<std::size_t>(k)] =
            cfg.disable_need_hierarchy ? 0 : tax.need_level[static_cast<std::size_t>(k)] - 1;
    }
    const int n1 = cfg.internal_dim;
    const int n2 = cfg.memory_dim;
    nets.flow_spec = net::make_mlp_spec(build_widths(n1 + n2, cfg.hidden, cfg.depth, n1),
                                        net::Act::kTanh, net::Act::kIdentity);
    nets.decay_spec = net::make_mlp_spec(
        build_widths(n1, cfg.hidden, cfg.depth, cfg.scalar_decay ? 1 : n2),
        net::Act::kTanh, net::Act::kSoftplus);
    nets.jump_spec = net::make_mlp_spec(
        build_widths(cfg.activity_embed_dim + n1, cfg.hidden, cfg.depth, n2),
        net::Act::kTanh, net::Act::kIdentity);
    return nets;
}

void check_finite(const std::vector<double>& v, int level, double t) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw DivergenceError("need state diverged at level " +
                                  std::to_string(level + 1) + " near t=" +
                                  std::to_string(t));
        }
    }
}

void check_finite_span(std::span<const double> v, int level, double t) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw DivergenceError("need state diverged at level " +
                                  std::to_string(level + 1) + " near t=" +
                                  std::to_string(t));
        }
    }
}

// Enumerates substeps of [t_from, t_to] split at the anchored grid points
// k*delta, calling step(a, b) for each piece in order.
template <class StepFn>
void for_each_substep(double t_from, double t_to, double delta, const StepFn& step) {
    if (t_to < t_from) {
        throw ContractError("integrate_flow requires t_to >= t_from");
    }
    double a = t_from;
    long long k = static_cast<long long>(std::floor(t_from / delta)) + 1;
    while ((k - 1) * static_cast<double>(delta) > t_from) --k;
    while (static_cast<double>(k) * delta <= t_from) ++k;
    for (; static_cast<double>(k) * delta < t_to; ++k) {
        const double b = static_cast<double>(k) * delta;
        step(a, b);
        a = b;
    }
    if (t_to > a) {
        step(a, t_to);
    }
}

}  // namespace

std::string DynamicsNets::flow_prefix(int level) const {
    return "dyn.l" + std::to_string(level) + ".flow";
}
std::string DynamicsNets::decay_prefix(int level) const {
    return "dyn.l" + std::to_string(level) + ".decay";
}
std::string DynamicsNets::jump_prefix(int level) const {
    return "dyn.l" + std::to_string(level) + ".jump";
}
std::string DynamicsNets::embed_name() const { return "dyn.embed"; }
std::string DynamicsNets::z0_c_name(int level) const {
    return "dyn.z0.l" + std::to_string(level) + ".c";
}
std::string DynamicsNets::z0_h_name(int level) const {
    return "dyn.z0.l" + std::to_string(level) + ".h";
}

DynamicsNets make_dynamics(const Config& cfg, const ActivityTaxonomy& tax,
                           net::ParamStore& store, RngStream& rng) {
    DynamicsNets nets = build_wiring(cfg, tax, store);
    for (int i = 0; i < nets.levels; ++i) {
        net::register_mlp(store, nets.flow_prefix(i), nets.flow_spec, rng);
        net::register_mlp(store, nets.decay_prefix(i), nets.decay_spec, rng);
        // Zeroed output layer: a fresh model has no jump response, so the
        // untrained state trajectory is exactly the flow from z(0).
        net::register_mlp(store, nets.jump_prefix(i), nets.jump_spec, rng, true);
        net::register_zeros(store, nets.z0_c_name(i),
                            {static_cast<std::size_t>(nets.internal_dim)});
        net::register_zeros(store, nets.z0_h_name(i),
                            {static_cast<std::size_t>(nets.memory_dim)});
    }
    net::register_embedding(store, nets.embed_name(), nets.M, nets.embed_dim, rng);
    return nets;
}

DynamicsNets attach_dynamics(const Config& cfg, const ActivityTaxonomy& tax,
                             net::ParamStore& store) {
    DynamicsNets nets = build_wiring(cfg, tax, store);
    for (int i = 0; i < nets.levels; ++i) {
        if (!store.has(nets.flow_prefix(i) + ".w0") || !store.has(nets.z0_c_name(i))) {
            throw ValidationError("parameter store lacks dynamics parameters for level " +
                                  std::to_string(i + 1));
        }
    }
    if (!store.has(nets.embed_name())) {
        throw ValidationError("parameter store lacks the activity embedding table");
    }
    return nets;
}

NeedState initial_state(const DynamicsNets& nets) {
    NeedState s;
    s.t = 0.0;
    s.c.resize(static_cast<std::size_t>(nets.levels));
    s.h.resize(static_cast<std::size_t>(nets.levels));
    for (int i = 0; i < nets.levels; ++i) {
        s.c[static_cast<std::size_t>(i)] = nets.store->value(nets.z0_c_name(i)).data;
        s.h[static_cast<std::size_t>(i)] = nets.store->value(nets.z0_h_name(i)).data;
    }
    return s;
}

std::pair<std::vector<double>, std::vector<double>> flow_derivative(
    const DynamicsNets& nets, int level, const NeedState& state) {
    const auto& c = state.c[static_cast<std::size_t>(level)];
    const auto& h = state.h[static_cast<std::size_t>(level)];
    std::vector<double> in(c.size() + h.size());
    std::copy(c.begin(), c.end(), in.begin());
    std::copy(h.begin(), h.end(), in.begin() + static_cast<std::ptrdiff_t>(c.size()));
    std::vector<double> dc =
        net::mlp_forward_plain(*nets.store, nets.flow_prefix(level), nets.flow_spec, in);
    std::vector<double> alpha =
        net::mlp_forward_plain(*nets.store, nets.decay_prefix(level), nets.decay_spec, c);
    return {std::move(dc), std::move(alpha)};
}

NeedState integrate_flow(const DynamicsNets& nets, const NeedState& state,
                         double t_from, double t_to, const BoundaryFn& on_boundary) {
    NeedState cur = state;
    for_each_substep(t_from, t_to, nets.delta, [&](double a, double b) {
        const double dt = b - a;
        for (int i = 0; i < nets.levels; ++i) {
            auto [dc, alpha] = flow_derivative(nets, i, cur);
            auto& c = cur.c[static_cast<std::size_t>(i)];
            auto& h = cur.h[static_cast<std::size_t>(i)];
            for (std::size_t j = 0; j < c.size(); ++j) {
                c[j] = c[j] + dc[j] * dt;
            }
            if (nets.scalar_decay) {
                const double f = std::exp(alpha[0] * (-dt));
                for (double& x : h) x = x * f;
            } else {
                for (std::size_t j = 0; j < h.size(); ++j) {
                    h[j] = h[j] * std::exp(alpha[j] * (-dt));
                }
            }
            check_finite(c, i, b);
            check_finite(h, i, b);
        }
        cur.t = b;
        if (on_boundary) {
            on_boundary(b, cur);
        }
    });
    cur.t = t_to;
    return cur;
}

NeedState apply_jump(const DynamicsNets& nets, const NeedState& state, int k) {
    if (k < 0 || k >= nets.M) {
        throw ContractError("event type out of range in apply_jump");
    }
    NeedState out = state;
    const int level = nets.level_of[static_cast<std::size_t>(k)];
    const auto& c = out.c[static_cast<std::size_t>(level)];
    const net::Tensor& embed = nets.store->value(nets.embed_name());
    std::vector<double> in(static_cast<std::size_t>(nets.embed_dim) + c.size());
    const double* e = embed.data.data() + static_cast<std::size_t>(k) * nets.embed_dim;
    std::copy(e, e + nets.embed_dim, in.begin());
    std::copy(c.begin(), c.end(), in.begin() + nets.embed_dim);
    std::vector<double> delta_h =
        net::mlp_forward_plain(*nets.store, nets.jump_prefix(level), nets.jump_spec, in);
    auto& h = out.h[static_cast<std::size_t>(level)];
    for (std::size_t j = 0; j < h.size(); ++j) {
        h[j] = h[j] + delta_h[j];
    }
    check_finite(h, level, state.t);
    return out;
}

NeedState replay_state(const DynamicsNets& nets, const ActivitySequence& seq,
                       double t) {
    NeedState cur = initial_state(nets);
    for (const Event& e : seq.events) {
        if (!(e.t < t)) {
            break;
        }
        cur = integrate_flow(nets, cur, cur.t, e.t);
        cur = apply_jump(nets, cur, e.k);
    }
    return integrate_flow(nets, cur, cur.t, t);
}

TapeNeedState tape_initial_state(net::Tape& tape, const DynamicsNets& nets) {
    TapeNeedState s;
    s.t = 0.0;
    for (int i = 0; i < nets.levels; ++i) {
        s.c.push_back(tape.param(nets.z0_c_name(i)));
        s.h.push_back(tape.param(nets.z0_h_name(i)));
    }
    return s;
}

void tape_integrate_flow(net::Tape& tape, const DynamicsNets& nets,
                         TapeNeedState& state, double t_from, double t_to,
                         const TapeBoundaryFn& on_boundary) {
    for_each_substep(t_from, t_to, nets.delta, [&](double a, double b) {
        const double dt = b - a;
        for (int i = 0; i < nets.levels; ++i) {
            net::Tape::Var c = state.c[static_cast<std::size_t>(i)];
            net::Tape::Var h = state.h[static_cast<std::size_t>(i)];
            net::Tape::Var dc =
                net::mlp_forward(tape, nets.flow_prefix(i), nets.flow_spec,
                                 tape.concat(c, h));
            net::Tape::Var alpha =
                net::mlp_forward(tape, nets.decay_prefix(i), nets.decay_spec, c);
            net::Tape::Var c_next = tape.add(c, tape.scale(dc, dt));
            net::Tape::Var decay = tape.exp_of(tape.scale(alpha, -dt));
            net::Tape::Var h_next = nets.scalar_decay ? tape.scale_by(h, decay)
                                                      : tape.mul(h, decay);
            check_finite_span(tape.value(c_next), i, b);
            check_finite_span(tape.value(h_next), i, b);
            state.c[static_cast<std::size_t>(i)] = c_next;
            state.h[static_cast<std::size_t>(i)] = h_next;
        }
        state.t = b;
        if (on_boundary) {
            on_boundary(b, state);
        }
    });
    state.t = t_to;
}

void tape_apply_jump(net::Tape& tape, const DynamicsNets& nets,
                     TapeNeedState& state, int k) {
    if (k < 0 || k >= nets.M) {
        throw ContractError("event type out of range in apply_jump");
    }
    const int level = nets.level_of[static_cast<std::size_t>(k)];
    net::Tape::Var c = state.c[static_cast<std::size_t>(level)];
    net::Tape::Var e = tape.row(tape.param(nets.embed_name()), k, nets.embed_dim);
    net::Tape::Var delta_h =
        net::mlp_forward(tape, nets.jump_prefix(level), nets.jump_spec,
                         tape.concat(e, c));
    state.h[static_cast<std::size_t>(level)] =
        tape.add(state.h[static_cast<std::size_t>(level)], delta_h);
}

}  // namespace sand::dyn
