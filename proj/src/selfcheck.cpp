#include "sand/selfcheck.hpp"

#include <string>
#include <vector>

#include "sand/training.hpp"

namespace sand::check {

namespace {

std::vector<std::string> names_containing(const net::ParamStore& store,
                                          const std::vector<std::string>& needles) {
    std::vector<std::string> out;
    for (const std::string& name : store.names()) {
        for (const std::string& needle : needles) {
            if (name.find(needle) != std::string::npos) {
                out.push_back(name);
                break;
            }
        }
    }
    return out;
}

}  // namespace

std::vector<PathCheck> gradient_path_checks(std::uint64_t seed) {
    Config cfg;
    cfg.internal_dim = 3;
    cfg.memory_dim = 3;
    cfg.activity_embed_dim = 4;
    cfg.feature_embed_dim = 3;
    cfg.hidden = 6;
    cfg.depth = 1;
    cfg.delta = 0.25;
    cfg.horizon_T = 2.0;
    cfg.history_window = 8;
    cfg.seed = seed;

    const ActivityTaxonomy tax = default_taxonomy();
    train::Model model(cfg, tax);

    // Move every parameter off its (partly zero) initialization so the
    // check exercises the nonlinear paths rather than degenerate zeros.
    RngStream noise(seed, 777);
    for (const std::string& name : model.store.names()) {
        net::Tensor& value = model.store.value(name);
        for (double& x : value.data) {
            x += noise.uniform(-0.4, 0.4);
        }
    }

    ActivitySequence seq;
    seq.user_id = "gc";
    seq.start_ts = cfg.start_ts;
    seq.horizon_T = cfg.horizon_T;
    seq.events = {Event{0.4, 0}, Event{0.9, 3}, Event{1.7, 8}};

    const auto ll_loss = [&](net::Tape& tape) {
        return policy::tape_sequence_log_likelihood(tape, model.nets, model.head, seq);
    };

    const train::ScoredSequence scored = train::make_scored(model.nets, tax, seq);
    const auto disc_loss = [&](net::Tape& tape) {
        const auto p0 = disc::history_prefix(scored.entries, 0, cfg.history_window);
        const auto p2 = disc::history_prefix(scored.entries, 2, cfg.history_window);
        const net::Tape::Var d0 =
            disc::tape_score(tape, model.discr, scored.z[0], p0, scored.entries[0].tau,
                             seq.events[0].k);
        const net::Tape::Var d2 =
            disc::tape_score(tape, model.discr, scored.z[2], p2, scored.entries[2].tau,
                             seq.events[2].k);
        return tape.add(tape.log_of(d0), tape.log_of(d2));
    };

    std::vector<PathCheck> results;
    results.push_back({"flow", net::grad_check_fn(
                                   model.store,
                                   names_containing(model.store, {".flow.", ".z0."}),
                                   ll_loss)});
    results.push_back({"decay", net::grad_check_fn(
                                    model.store,
                                    names_containing(model.store, {".decay."}),
                                    ll_loss)});
    results.push_back({"jump", net::grad_check_fn(
                                   model.store,
                                   names_containing(model.store, {".jump.", "dyn.embed"}),
                                   ll_loss)});
    results.push_back({"intensity", net::grad_check_fn(
                                        model.store,
                                        model.store.names_with_prefix("policy."),
                                        ll_loss)});
    results.push_back({"discriminator", net::grad_check_fn(
                                            model.store,
                                            model.store.names_with_prefix("disc."),
                                            disc_loss)});
    return results;
}

}  // namespace sand::check
