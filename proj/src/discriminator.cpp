#include "sand/discriminator.hpp"

#include <algorithm>
#include <cmath>

namespace sand::disc {

namespace {

constexpr double kLogitClamp = 30.0;

Discriminator build(const Config& cfg, const ActivityTaxonomy& tax) {
    Discriminator d;
    d.M = tax.M;
    d.feat_dim = cfg.feature_embed_dim;
    d.state_dim = cfg.levels() * (cfg.internal_dim + cfg.memory_dim);
    d.entry_dim = 1 + 4 * cfg.feature_embed_dim;
    d.context_dim = cfg.hidden;
    d.history_window = cfg.history_window;
    d.att_spec = net::AttentionSpec{d.entry_dim, cfg.hidden, d.context_dim};
    std::vector<int> widths;
    widths.push_back(d.state_dim + d.context_dim + 1 + d.feat_dim);
    for (int l = 0; l < cfg.depth; ++l) {
        widths.push_back(cfg.hidden);
    }
    widths.push_back(1);
    d.score_spec = net::make_mlp_spec(widths, net::Act::kTanh, net::Act::kIdentity);
    return d;
}

std::vector<double> entry_vector(const Discriminator& model, const HistoryEntry& e) {
    const net::ParamStore& store = *model.store;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(model.entry_dim));
    out.push_back(std::log1p(e.tau));
    const int d = model.feat_dim;
    auto append_row = [&](const std::string& table, int row) {
        const net::Tensor& t = store.value(table);
        const double* p = t.data.data() + static_cast<std::size_t>(row) * d;
        out.insert(out.end(), p, p + d);
    };
    append_row(model.hour_table(), e.hour);
    append_row(model.weekday_table(), e.weekday);
    append_row(model.type_table(), e.k);
    append_row(model.level_table(), e.level);
    return out;
}

net::Tape::Var tape_entry_vector(net::Tape& tape, const Discriminator& model,
                                 const HistoryEntry& e) {
    const double lt = std::log1p(e.tau);
    net::Tape::Var v = tape.input(std::span<const double>(&lt, 1));
    const int d = model.feat_dim;
    v = tape.concat(v, tape.row(tape.param(model.hour_table()), e.hour, d));
    v = tape.concat(v, tape.row(tape.param(model.weekday_table()), e.weekday, d));
    v = tape.concat(v, tape.row(tape.param(model.type_table()), e.k, d));
    v = tape.concat(v, tape.row(tape.param(model.level_table()), e.level, d));
    return v;
}

void check_entry(const Discriminator& model, const HistoryEntry& e) {
    if (e.tau < 0.0 || e.hour < 0 || e.hour >= 24 || e.weekday < 0 || e.weekday >= 7 ||
        e.k < 0 || e.k >= model.M || e.level < 0 || e.level >= 3) {
        throw ContractError("history entry outside table ranges");
    }
}

}  // namespace

Discriminator make_discriminator(const Config& cfg, const ActivityTaxonomy& tax,
                                 net::ParamStore& store, RngStream& rng) {
    Discriminator d = build(cfg, tax);
    d.store = &store;
    net::register_embedding(store, d.hour_table(), 24, d.feat_dim, rng);
    net::register_embedding(store, d.weekday_table(), 7, d.feat_dim, rng);
    net::register_embedding(store, d.type_table(), d.M, d.feat_dim, rng);
    net::register_embedding(store, d.level_table(), 3, d.feat_dim, rng);
    net::register_attention(store, d.att_prefix(), d.att_spec, rng);
    net::register_zeros(store, d.empty_name(),
                        {static_cast<std::size_t>(d.context_dim)});
    // Zeroed output layer: a fresh discriminator scores D = 0.5 everywhere,
    // so the first adversarial reward is exactly -ln 2.
    net::register_mlp(store, d.score_prefix(), d.score_spec, rng, true);
    return d;
}

Discriminator attach_discriminator(const Config& cfg, const ActivityTaxonomy& tax,
                                   net::ParamStore& store) {
    Discriminator d = build(cfg, tax);
    d.store = &store;
    if (!store.has(d.score_prefix() + ".w0") || !store.has(d.empty_name())) {
        throw ValidationError("parameter store lacks discriminator parameters");
    }
    return d;
}

std::vector<HistoryEntry> history_entries(const ActivitySequence& seq,
                                          const ActivityTaxonomy& tax) {
    std::vector<HistoryEntry> out;
    out.reserve(seq.events.size());
    double prev_t = 0.0;
    for (const Event& e : seq.events) {
        HistoryEntry h;
        h.tau = e.t - prev_t;
        const CalendarFeatures cal = calendar_features(seq.start_ts, e.t);
        h.hour = cal.hour;
        h.weekday = cal.weekday;
        h.k = e.k;
        h.level = tax.need_level[static_cast<std::size_t>(e.k)] - 1;
        out.push_back(h);
        prev_t = e.t;
    }
    return out;
}

std::span<const HistoryEntry> history_prefix(const std::vector<HistoryEntry>& entries,
                                             std::size_t i, int window) {
    const std::size_t lo = i > static_cast<std::size_t>(window)
                               ? i - static_cast<std::size_t>(window)
                               : 0;
    return {entries.data() + lo, i - lo};
}

std::vector<double> encode_history(const Discriminator& model,
                                   std::span<const HistoryEntry> prefix) {
    if (prefix.empty()) {
        return model.store->value(model.empty_name()).data;
    }
    std::vector<std::vector<double>> xs;
    xs.reserve(prefix.size());
    for (const HistoryEntry& e : prefix) {
        check_entry(model, e);
        xs.push_back(entry_vector(model, e));
    }
    return net::attention_pool_plain(*model.store, model.att_prefix(), model.att_spec, xs);
}

double score(const Discriminator& model, const std::vector<double>& z,
             std::span<const HistoryEntry> prefix, double tau, int k) {
    if (static_cast<int>(z.size()) != model.state_dim) {
        throw ContractError("state width mismatch in discriminator score");
    }
    if (k < 0 || k >= model.M || tau < 0.0) {
        throw ContractError("action outside discriminator ranges");
    }
    const std::vector<double> context = encode_history(model, prefix);
    std::vector<double> in;
    in.reserve(static_cast<std::size_t>(model.score_spec.input_width()));
    in.insert(in.end(), z.begin(), z.end());
    in.insert(in.end(), context.begin(), context.end());
    in.push_back(std::log1p(tau));
    const net::Tensor& types = model.store->value(model.type_table());
    const double* row = types.data.data() + static_cast<std::size_t>(k) * model.feat_dim;
    in.insert(in.end(), row, row + model.feat_dim);
    const std::vector<double> logit =
        net::mlp_forward_plain(*model.store, model.score_prefix(), model.score_spec, in);
    const double clamped = std::min(std::max(logit[0], -kLogitClamp), kLogitClamp);
    return net::kernels::sigmoid(clamped);
}

double reward(const Discriminator& model, const std::vector<double>& z,
              std::span<const HistoryEntry> prefix, double tau, int k) {
    return std::log(score(model, z, prefix, tau, k));
}

net::Tape::Var tape_score(net::Tape& tape, const Discriminator& model,
                          const std::vector<double>& z,
                          std::span<const HistoryEntry> prefix, double tau, int k) {
    if (static_cast<int>(z.size()) != model.state_dim) {
        throw ContractError("state width mismatch in discriminator score");
    }
    if (k < 0 || k >= model.M || tau < 0.0) {
        throw ContractError("action outside discriminator ranges");
    }
    net::Tape::Var context;
    if (prefix.empty()) {
        context = tape.param(model.empty_name());
    } else {
        std::vector<net::Tape::Var> xs;
        xs.reserve(prefix.size());
        for (const HistoryEntry& e : prefix) {
            check_entry(model, e);
            xs.push_back(tape_entry_vector(tape, model, e));
        }
        context = net::attention_pool(tape, model.att_prefix(), model.att_spec, xs);
    }
    net::Tape::Var in = tape.concat(tape.input(z), context);
    const double lt = std::log1p(tau);
    in = tape.concat(in, tape.input(std::span<const double>(&lt, 1)));
    in = tape.concat(in, tape.row(tape.param(model.type_table()), k, model.feat_dim));
    net::Tape::Var logit = net::mlp_forward(tape, model.score_prefix(), model.score_spec, in);
    return tape.activation(tape.clamp(logit, -kLogitClamp, kLogitClamp), net::Act::kSigmoid);
}

}  // namespace sand::disc
