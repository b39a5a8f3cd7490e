#include "sand/policy.hpp"

#include <algorithm>
#include <cmath>

namespace sand::policy {

namespace {

constexpr long kMaxCandidates = 1000000;

std::vector<int> head_widths(const Config& cfg, int state_dim, int M) {
    std::vector<int> widths;
    widths.push_back(state_dim);
    for (int l = 0; l < cfg.depth; ++l) {
        widths.push_back(cfg.hidden);
    }
    widths.push_back(M);
    return widths;
}

IntensityHead build_head(const Config& cfg, const ActivityTaxonomy& tax) {
    IntensityHead head;
    head.M = tax.M;
    head.levels = cfg.levels();
    head.state_dim = head.levels * (cfg.internal_dim + cfg.memory_dim);
    head.lambda_min = cfg.lambda_min;
    head.lambda_max = cfg.lambda_max;
    head.lookahead_hours = cfg.lookahead_hours;
    head.bound_multiplier = cfg.bound_multiplier;
    head.spec = net::make_mlp_spec(head_widths(cfg, head.state_dim, tax.M),
                                   net::Act::kTanh, net::Act::kSoftplus);
    return head;
}

double lambda_sum(const std::vector<double>& lam) {
    double s = 0.0;
    for (double v : lam) s += v;
    return s;
}

struct Advance {
    double integral = 0.0;
    dyn::NeedState state;
};

// Advances the state and accumulates the trapezoid integral of lambda*
// over [t_from, t_to] on the aligned grid.
Advance advance_with_integral(const dyn::DynamicsNets& nets, const IntensityHead& head,
                              const dyn::NeedState& state, double t_from, double t_to) {
    Advance out;
    double acc = 0.0;
    double prev_t = t_from;
    double prev_sum = lambda_sum(intensities(head, state));
    out.state = dyn::integrate_flow(
        nets, state, t_from, t_to, [&](double t, const dyn::NeedState& s) {
            const double cur_sum = lambda_sum(intensities(head, s));
            const double w = 0.5 * (t - prev_t);
            acc = acc + (prev_sum + cur_sum) * w;
            prev_sum = cur_sum;
            prev_t = t;
        });
    out.integral = acc;
    return out;
}

int sample_type(const std::vector<double>& lam, double total, RngStream& rng) {
    const double u = rng.uniform01() * total;
    double c = 0.0;
    for (std::size_t k = 0; k < lam.size(); ++k) {
        c += lam[k];
        if (u < c) {
            return static_cast<int>(k);
        }
    }
    return static_cast<int>(lam.size()) - 1;
}

}  // namespace

IntensityHead make_intensity_head(const Config& cfg, const ActivityTaxonomy& tax,
                                  net::ParamStore& store, RngStream& rng) {
    IntensityHead head = build_head(cfg, tax);
    head.store = &store;
    net::register_mlp(store, head.prefix(), head.spec, rng);
    return head;
}

IntensityHead attach_intensity_head(const Config& cfg, const ActivityTaxonomy& tax,
                                    net::ParamStore& store) {
    IntensityHead head = build_head(cfg, tax);
    head.store = &store;
    if (!store.has(head.prefix() + ".w0")) {
        throw ValidationError("parameter store lacks the intensity head");
    }
    return head;
}

std::vector<double> state_vector(const dyn::NeedState& state) {
    std::vector<double> out;
    for (int i = 0; i < state.levels(); ++i) {
        const auto& c = state.c[static_cast<std::size_t>(i)];
        const auto& h = state.h[static_cast<std::size_t>(i)];
        out.insert(out.end(), c.begin(), c.end());
        out.insert(out.end(), h.begin(), h.end());
    }
    return out;
}

std::vector<double> intensities(const IntensityHead& head, const dyn::NeedState& state) {
    std::vector<double> lam =
        net::mlp_forward_plain(*head.store, head.prefix(), head.spec, state_vector(state));
    for (double& v : lam) {
        v = std::min(std::max(v, head.lambda_min), head.lambda_max);
    }
    return lam;
}

net::Tape::Var tape_intensities(net::Tape& tape, const IntensityHead& head,
                                const dyn::TapeNeedState& state) {
    net::Tape::Var in = -1;
    for (std::size_t i = 0; i < state.c.size(); ++i) {
        net::Tape::Var z = tape.concat(state.c[i], state.h[i]);
        in = (i == 0) ? z : tape.concat(in, z);
    }
    net::Tape::Var lam = net::mlp_forward(tape, head.prefix(), head.spec, in);
    return tape.clamp(lam, head.lambda_min, head.lambda_max);
}

std::vector<double> type_distribution(const std::vector<double>& lambda) {
    if (lambda.empty()) {
        throw ContractError("type_distribution over empty intensity vector");
    }
    const double total = lambda_sum(lambda);
    if (!(total > 0.0)) {
        throw ContractError("type_distribution requires positive intensities");
    }
    std::vector<double> p(lambda.size());
    for (std::size_t k = 0; k < lambda.size(); ++k) {
        p[k] = lambda[k] / total;
    }
    return p;
}

std::optional<NextEvent> sample_next_event(const dyn::DynamicsNets& nets,
                                           const IntensityHead& head,
                                           const dyn::NeedState& state, double t_now,
                                           double horizon_T, RngStream& rng) {
    if (!(t_now < horizon_T)) {
        return std::nullopt;
    }
    long draws = 0;
    dyn::NeedState cur = state;
    double w_start = t_now;
    while (true) {
        const double w_end = std::min(w_start + head.lookahead_hours, horizon_T);
        std::vector<double> btimes{w_start};
        std::vector<std::vector<double>> blams{intensities(head, cur)};
        dyn::NeedState end_state = dyn::integrate_flow(
            nets, cur, w_start, w_end, [&](double t, const dyn::NeedState& s) {
                btimes.push_back(t);
                blams.push_back(intensities(head, s));
            });
        double max_sum = 0.0;
        for (const auto& lam : blams) {
            max_sum = std::max(max_sum, lambda_sum(lam));
        }
        double bound = head.bound_multiplier * max_sum;
        double s = w_start;
        bool window_done = false;
        while (!window_done) {
            if (++draws > kMaxCandidates) {
                throw StallError("thinning exceeded " + std::to_string(kMaxCandidates) +
                                 " candidates in one call");
            }
            s += rng.exponential(bound);
            if (s >= w_end) {
                window_done = true;
                break;
            }
            const auto it = std::upper_bound(btimes.begin(), btimes.end(), s);
            const std::size_t idx = static_cast<std::size_t>(it - btimes.begin()) - 1;
            const double total = lambda_sum(blams[idx]);
            if (total > bound) {
                bound *= 2.0;
                s = w_start;
                continue;
            }
            if (rng.uniform01() * bound < total) {
                NextEvent ev;
                ev.t_abs = s;
                ev.tau = s - t_now;
                ev.k = sample_type(blams[idx], total, rng);
                return ev;
            }
        }
        if (w_end >= horizon_T) {
            return std::nullopt;
        }
        cur = std::move(end_state);
        w_start = w_end;
    }
}

RolloutResult rollout(const dyn::DynamicsNets& nets, const IntensityHead& head,
                      std::int64_t start_ts, double horizon_T, int max_events,
                      RngStream& rng, const std::string& user_id) {
    if (!(horizon_T >= 0.0)) {
        throw ContractError("rollout requires horizon_T >= 0");
    }
    RolloutResult out;
    out.seq.user_id = user_id;
    out.seq.start_ts = start_ts;
    out.seq.horizon_T = horizon_T;
    dyn::NeedState cur = dyn::initial_state(nets);
    while (true) {
        if (static_cast<int>(out.seq.events.size()) >= max_events) {
            out.record.truncated = true;
            break;
        }
        auto next = sample_next_event(nets, head, cur, cur.t, horizon_T, rng);
        if (!next) {
            out.record.tail_integral =
                advance_with_integral(nets, head, cur, cur.t, horizon_T).integral;
            break;
        }
        Advance adv = advance_with_integral(nets, head, cur, cur.t, next->t_abs);
        const std::vector<double> lam = intensities(head, adv.state);
        const Event ev{next->t_abs, next->k};
        out.seq.events.push_back(ev);
        out.record.events.push_back(ev);
        out.record.log_prob.push_back(std::log(lam[static_cast<std::size_t>(next->k)]) -
                                      adv.integral);
        out.record.states.push_back(adv.state);
        out.record.reward.push_back(0.0);
        out.record.interval_integral.push_back(adv.integral);
        cur = dyn::apply_jump(nets, adv.state, next->k);
    }
    return out;
}

double sequence_log_likelihood(const dyn::DynamicsNets& nets, const IntensityHead& head,
                               const ActivitySequence& seq) {
    double ll = 0.0;
    dyn::NeedState cur = dyn::initial_state(nets);
    for (const Event& e : seq.events) {
        if (e.k < 0 || e.k >= head.M) {
            throw ContractError("event type out of range in log-likelihood");
        }
        Advance adv = advance_with_integral(nets, head, cur, cur.t, e.t);
        const std::vector<double> lam = intensities(head, adv.state);
        ll = ll + (std::log(lam[static_cast<std::size_t>(e.k)]) - adv.integral);
        cur = dyn::apply_jump(nets, adv.state, e.k);
    }
    ll = ll - advance_with_integral(nets, head, cur, cur.t, seq.horizon_T).integral;
    return ll;
}

namespace {

net::Tape::Var tape_advance_integral(net::Tape& tape, const dyn::DynamicsNets& nets,
                                     const IntensityHead& head, dyn::TapeNeedState& state,
                                     double t_from, double t_to) {
    net::Tape::Var acc = tape.constant(0.0);
    double prev_t = t_from;
    net::Tape::Var prev_sum = tape.sum(tape_intensities(tape, head, state));
    dyn::tape_integrate_flow(tape, nets, state, t_from, t_to,
                             [&](double t, const dyn::TapeNeedState& s) {
                                 net::Tape::Var cur_sum =
                                     tape.sum(tape_intensities(tape, head, s));
                                 const double w = 0.5 * (t - prev_t);
                                 acc = tape.add(acc,
                                                tape.scale(tape.add(prev_sum, cur_sum), w));
                                 prev_sum = cur_sum;
                                 prev_t = t;
                             });
    return acc;
}

}  // namespace

std::vector<net::Tape::Var> tape_action_log_probs(net::Tape& tape,
                                                  const dyn::DynamicsNets& nets,
                                                  const IntensityHead& head,
                                                  const ActivitySequence& seq) {
    std::vector<net::Tape::Var> out;
    dyn::TapeNeedState st = dyn::tape_initial_state(tape, nets);
    for (const Event& e : seq.events) {
        if (e.k < 0 || e.k >= head.M) {
            throw ContractError("event type out of range in log-likelihood");
        }
        net::Tape::Var integral = tape_advance_integral(tape, nets, head, st, st.t, e.t);
        net::Tape::Var lam = tape_intensities(tape, head, st);
        out.push_back(tape.sub(tape.log_of(tape.pick(lam, e.k)), integral));
        dyn::tape_apply_jump(tape, nets, st, e.k);
    }
    return out;
}

net::Tape::Var tape_sequence_log_likelihood(net::Tape& tape,
                                            const dyn::DynamicsNets& nets,
                                            const IntensityHead& head,
                                            const ActivitySequence& seq) {
    net::Tape::Var ll = tape.constant(0.0);
    dyn::TapeNeedState st = dyn::tape_initial_state(tape, nets);
    for (const Event& e : seq.events) {
        if (e.k < 0 || e.k >= head.M) {
            throw ContractError("event type out of range in log-likelihood");
        }
        net::Tape::Var integral = tape_advance_integral(tape, nets, head, st, st.t, e.t);
        net::Tape::Var lam = tape_intensities(tape, head, st);
        ll = tape.add(ll, tape.sub(tape.log_of(tape.pick(lam, e.k)), integral));
        dyn::tape_apply_jump(tape, nets, st, e.k);
    }
    ll = tape.sub(ll, tape_advance_integral(tape, nets, head, st, st.t, seq.horizon_T));
    return ll;
}

}  // namespace sand::policy
