#include "sand/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace sand::train {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// RNG stream ids: model init, epoch shuffles, and per-rollout streams
// must never collide so that every phase is order-independent.
constexpr std::uint64_t kInitStream = 1000000007ull;
constexpr std::uint64_t kPretrainShuffleStream = 3000000001ull;
constexpr std::uint64_t kGailShuffleStream = 4000000001ull;
constexpr std::uint64_t kGailRolloutBase = 1ull << 32;

double elapsed_seconds(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

using Snapshot = std::vector<std::pair<std::string, std::vector<double>>>;

Snapshot snapshot(const net::ParamStore& store) {
    Snapshot snap;
    for (const std::string& name : store.names()) {
        snap.emplace_back(name, store.value(name).data);
    }
    return snap;
}

void restore(net::ParamStore& store, const Snapshot& snap) {
    for (const auto& [name, data] : snap) {
        store.value(name).data = data;
    }
}

void shuffle_indices(std::vector<std::size_t>& order, RngStream& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::uint64_t j = rng.below(i);
        std::swap(order[i - 1], order[j]);
    }
}

net::AdamState make_adam(const Config& cfg, double lr) {
    net::AdamState adam;
    adam.lr = lr;
    adam.beta1 = cfg.adam_beta1;
    adam.beta2 = cfg.adam_beta2;
    adam.eps = cfg.adam_eps;
    return adam;
}

}  // namespace

Model::Model(const Config& cfg_, const ActivityTaxonomy& tax_) : cfg(cfg_), tax(tax_) {
    cfg.validate();
    tax.validate();
    RngStream rng(cfg.seed, kInitStream);
    nets = dyn::make_dynamics(cfg, tax, store, rng);
    head = policy::make_intensity_head(cfg, tax, store, rng);
    discr = disc::make_discriminator(cfg, tax, store, rng);
}

Model::Model(const Config& cfg_, const ActivityTaxonomy& tax_, net::ParamStore&& loaded)
    : cfg(cfg_), tax(tax_), store(std::move(loaded)) {
    cfg.validate();
    tax.validate();
    nets = dyn::attach_dynamics(cfg, tax, store);
    head = policy::attach_intensity_head(cfg, tax, store);
    discr = disc::attach_discriminator(cfg, tax, store);
}

std::vector<std::string> Model::generator_names() const {
    std::vector<std::string> names = store.names_with_prefix("dyn.");
    for (std::string& name : store.names_with_prefix("policy.")) {
        names.push_back(std::move(name));
    }
    return names;
}

std::vector<std::string> Model::discriminator_names() const {
    return store.names_with_prefix("disc.");
}

void Model::save(const std::string& path) const { net::save_params(store, path); }

std::unique_ptr<Model> Model::load(const Config& cfg, const ActivityTaxonomy& tax,
                                   const std::string& path) {
    Model probe(cfg, tax);
    net::ParamStore loaded = net::load_params(path, probe.store.names());
    for (const std::string& name : probe.store.names()) {
        if (loaded.value(name).shape != probe.store.value(name).shape) {
            throw ValidationError("checkpoint tensor \"" + name +
                                  "\" has a shape inconsistent with the config");
        }
    }
    return std::make_unique<Model>(cfg, tax, std::move(loaded));
}

std::string TrainReport::to_json() const {
    json j;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["pretrain_nll"] = pretrain_nll;
    j["disc_loss"] = disc_loss;
    j["policy_loss"] = policy_loss;
    j["mean_reward"] = mean_reward;
    j["aborted_reason"] = aborted_reason;
    return j.dump(2);
}

void pretrain_mle(Model& model, const Corpus& corpus, TrainReport& report,
                  const ProgressFn& progress) {
    if (corpus.empty()) {
        throw ValidationError("pretraining requires a non-empty corpus");
    }
    const auto t0 = Clock::now();
    report.seed = model.cfg.seed;
    report.config_hash = model.cfg.hash();
    const std::vector<std::string> names = model.generator_names();
    net::AdamState adam = make_adam(model.cfg, model.cfg.lr_pretrain);
    RngStream shuffle_rng(model.cfg.seed, kPretrainShuffleStream);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Snapshot last_good = snapshot(model.store);

    const std::size_t n = corpus.size();
    const std::size_t batch = static_cast<std::size_t>(model.cfg.batch_size);
    for (int epoch = 0; epoch < model.cfg.pretrain_epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        double nll_sum = 0.0;
        try {
            for (std::size_t start = 0; start < n; start += batch) {
                const std::size_t bn = std::min(batch, n - start);
                model.store.zero_grads();
                for (std::size_t j = 0; j < bn; ++j) {
                    net::Tape tape(&model.store);
                    const net::Tape::Var ll = policy::tape_sequence_log_likelihood(
                        tape, model.nets, model.head, corpus[order[start + j]]);
                    const double v = tape.scalar(ll);
                    if (!std::isfinite(v)) {
                        throw DivergenceError("non-finite sequence likelihood");
                    }
                    nll_sum += -v;
                    tape.backward(ll, -1.0 / static_cast<double>(bn));
                }
                model.store.clip_grad_norm(names, model.cfg.grad_clip);
                net::adam_step(model.store, adam, names);
            }
        } catch (const DivergenceError& e) {
            restore(model.store, last_good);
            report.aborted_reason =
                "pretrain epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
        const double nll = nll_sum / static_cast<double>(n);
        report.pretrain_nll.push_back(nll);
        if (progress) {
            json line;
            line["epoch"] = epoch;
            line["nll"] = nll;
            progress(line.dump());
        }
        last_good = snapshot(model.store);
    }
    report.wall_clock_seconds += elapsed_seconds(t0);
}

ScoredSequence make_scored(const dyn::DynamicsNets& nets, const ActivityTaxonomy& tax,
                           const ActivitySequence& seq) {
    ScoredSequence out;
    out.entries = disc::history_entries(seq, tax);
    out.events = seq.events;
    dyn::NeedState cur = dyn::initial_state(nets);
    for (const Event& e : seq.events) {
        cur = dyn::integrate_flow(nets, cur, cur.t, e.t);
        out.z.push_back(policy::state_vector(cur));
        cur = dyn::apply_jump(nets, cur, e.k);
    }
    return out;
}

double ranking_auc(const std::vector<double>& real_scores,
                   const std::vector<double>& fake_scores) {
    if (real_scores.empty() || fake_scores.empty()) {
        throw ContractError("ranking_auc requires scores on both sides");
    }
    std::vector<double> fake_sorted = fake_scores;
    std::sort(fake_sorted.begin(), fake_sorted.end());
    double wins = 0.0;
    for (double r : real_scores) {
        const auto lo = std::lower_bound(fake_sorted.begin(), fake_sorted.end(), r);
        const auto hi = std::upper_bound(fake_sorted.begin(), fake_sorted.end(), r);
        wins += static_cast<double>(lo - fake_sorted.begin());
        wins += 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(real_scores.size()) *
                   static_cast<double>(fake_sorted.size()));
}

namespace {

struct GailBatch {
    std::vector<policy::RolloutResult> fakes;
    std::vector<ScoredSequence> fake_scored;
    std::vector<ScoredSequence> real_scored;
};

GailBatch collect_batch(Model& model, const Corpus& corpus,
                        const std::vector<std::size_t>& order, std::size_t& cursor,
                        int iteration) {
    GailBatch batch;
    const int B = model.cfg.batch_size;
    for (int b = 0; b < B; ++b) {
        RngStream rng(model.cfg.seed,
                      kGailRolloutBase +
                          static_cast<std::uint64_t>(iteration) *
                              static_cast<std::uint64_t>(B) +
                          static_cast<std::uint64_t>(b));
        batch.fakes.push_back(policy::rollout(model.nets, model.head, model.cfg.start_ts,
                                              model.cfg.horizon_T, model.cfg.max_events,
                                              rng));
    }
    for (const policy::RolloutResult& rr : batch.fakes) {
        ScoredSequence s;
        s.entries = disc::history_entries(rr.seq, model.tax);
        s.events = rr.seq.events;
        for (const dyn::NeedState& st : rr.record.states) {
            s.z.push_back(policy::state_vector(st));
        }
        batch.fake_scored.push_back(std::move(s));
    }
    for (int b = 0; b < B; ++b) {
        batch.real_scored.push_back(
            make_scored(model.nets, model.tax, corpus[order[cursor]]));
        cursor = (cursor + 1) % order.size();
    }
    return batch;
}

// One BCE step over every (state, action) pair in the batch; real pairs
// carry the smoothed label.
double discriminator_step(Model& model, const GailBatch& batch, net::AdamState& adam) {
    std::size_t n_pairs = 0;
    for (const ScoredSequence& s : batch.real_scored) n_pairs += s.events.size();
    for (const ScoredSequence& s : batch.fake_scored) n_pairs += s.events.size();
    if (n_pairs == 0) {
        return 0.0;
    }
    model.store.zero_grads();
    net::Tape tape(&model.store);
    net::Tape::Var loss = tape.constant(0.0);
    const net::Tape::Var one = tape.constant(1.0);
    const double y = model.cfg.label_smoothing;
    auto add_pairs = [&](const ScoredSequence& s, bool real) {
        for (std::size_t i = 0; i < s.events.size(); ++i) {
            const auto prefix =
                disc::history_prefix(s.entries, i, model.discr.history_window);
            const net::Tape::Var d = disc::tape_score(tape, model.discr, s.z[i], prefix,
                                                      s.entries[i].tau, s.events[i].k);
            net::Tape::Var term;
            if (real) {
                term = tape.neg(tape.add(tape.scale(tape.log_of(d), y),
                                         tape.scale(tape.log_of(tape.sub(one, d)),
                                                    1.0 - y)));
            } else {
                term = tape.neg(tape.log_of(tape.sub(one, d)));
            }
            loss = tape.add(loss, term);
        }
    };
    for (const ScoredSequence& s : batch.real_scored) add_pairs(s, true);
    for (const ScoredSequence& s : batch.fake_scored) add_pairs(s, false);
    loss = tape.scale(loss, 1.0 / static_cast<double>(n_pairs));
    const double value = tape.scalar(loss);
    tape.backward(loss);
    net::adam_step(model.store, adam, model.discriminator_names());
    return value;
}

}  // namespace

void train_gail(Model& model, const Corpus& corpus, TrainReport& report,
                const ProgressFn& progress) {
    if (report.config_hash.empty()) {
        report.seed = model.cfg.seed;
        report.config_hash = model.cfg.hash();
    }
    if (model.cfg.disable_gail) {
        return;
    }
    if (corpus.empty()) {
        throw ValidationError("adversarial training requires a non-empty corpus");
    }
    const auto t0 = Clock::now();
    net::AdamState adam_gen = make_adam(model.cfg, model.cfg.lr_policy);
    net::AdamState adam_disc = make_adam(model.cfg, model.cfg.lr_disc);
    const std::vector<std::string> gen_names = model.generator_names();

    RngStream shuffle_rng(model.cfg.seed, kGailShuffleStream);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_indices(order, shuffle_rng);
    std::size_t cursor = 0;
    Snapshot last_good = snapshot(model.store);

    for (int it = 0; it < model.cfg.gail_iterations; ++it) {
        try {
            GailBatch batch = collect_batch(model, corpus, order, cursor, it);
            const double disc_loss = discriminator_step(model, batch, adam_disc);

            // Rewards from the updated discriminator; constants for the
            // score-function gradient.
            double reward_sum = 0.0;
            std::size_t reward_n = 0;
            for (std::size_t b = 0; b < batch.fakes.size(); ++b) {
                const ScoredSequence& s = batch.fake_scored[b];
                auto& rec = batch.fakes[b].record;
                for (std::size_t i = 0; i < s.events.size(); ++i) {
                    const auto prefix =
                        disc::history_prefix(s.entries, i, model.discr.history_window);
                    rec.reward[i] = disc::reward(model.discr, s.z[i], prefix,
                                                 s.entries[i].tau, s.events[i].k);
                    reward_sum += rec.reward[i];
                    reward_n += 1;
                }
            }
            const double mean_reward =
                reward_n > 0 ? reward_sum / static_cast<double>(reward_n) : 0.0;

            double policy_loss = 0.0;
            if (reward_n > 0) {
                model.store.zero_grads();
                const double inv_b = 1.0 / static_cast<double>(batch.fakes.size());
                for (const policy::RolloutResult& rr : batch.fakes) {
                    if (rr.seq.events.empty()) {
                        continue;
                    }
                    net::Tape tape(&model.store);
                    const std::vector<net::Tape::Var> logps = policy::tape_action_log_probs(
                        tape, model.nets, model.head, rr.seq);
                    net::Tape::Var obj = tape.constant(0.0);
                    for (std::size_t i = 0; i < logps.size(); ++i) {
                        obj = tape.add(obj,
                                       tape.scale(logps[i], rr.record.reward[i] - mean_reward));
                    }
                    const net::Tape::Var loss = tape.neg(obj);
                    policy_loss += tape.scalar(loss) * inv_b;
                    tape.backward(loss, inv_b);
                }
                model.store.clip_grad_norm(gen_names, model.cfg.grad_clip);
                net::adam_step(model.store, adam_gen, gen_names);
            }

            report.disc_loss.push_back(disc_loss);
            report.policy_loss.push_back(policy_loss);
            report.mean_reward.push_back(mean_reward);
            if (progress) {
                json line;
                line["iteration"] = it;
                line["disc_loss"] = disc_loss;
                line["policy_loss"] = policy_loss;
                line["mean_reward"] = mean_reward;
                progress(line.dump());
            }
            last_good = snapshot(model.store);
        } catch (const DivergenceError& e) {
            restore(model.store, last_good);
            report.aborted_reason =
                "adversarial iteration " + std::to_string(it) + ": " + e.what();
            break;
        } catch (const StallError& e) {
            restore(model.store, last_good);
            report.aborted_reason =
                "adversarial iteration " + std::to_string(it) + ": " + e.what();
            break;
        }
    }
    report.wall_clock_seconds += elapsed_seconds(t0);
}

std::vector<double> train_discriminator_only(Model& model, const Corpus& corpus,
                                             int iterations,
                                             const ProgressFn& progress) {
    if (corpus.empty()) {
        throw ValidationError("discriminator training requires a non-empty corpus");
    }
    net::AdamState adam_disc = make_adam(model.cfg, model.cfg.lr_disc);
    RngStream shuffle_rng(model.cfg.seed, kGailShuffleStream);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_indices(order, shuffle_rng);
    std::size_t cursor = 0;

    std::vector<double> auc_per_iter;
    for (int it = 0; it < iterations; ++it) {
        GailBatch batch = collect_batch(model, corpus, order, cursor, it);
        const double disc_loss = discriminator_step(model, batch, adam_disc);
        std::vector<double> real_scores;
        std::vector<double> fake_scores;
        auto collect = [&](const ScoredSequence& s, std::vector<double>& dst) {
            for (std::size_t i = 0; i < s.events.size(); ++i) {
                const auto prefix =
                    disc::history_prefix(s.entries, i, model.discr.history_window);
                dst.push_back(disc::score(model.discr, s.z[i], prefix, s.entries[i].tau,
                                          s.events[i].k));
            }
        };
        for (const ScoredSequence& s : batch.real_scored) collect(s, real_scores);
        for (const ScoredSequence& s : batch.fake_scored) collect(s, fake_scores);
        const double auc = ranking_auc(real_scores, fake_scores);
        auc_per_iter.push_back(auc);
        if (progress) {
            json line;
            line["iteration"] = it;
            line["disc_loss"] = disc_loss;
            line["auc"] = auc;
            progress(line.dump());
        }
    }
    return auc_per_iter;
}

// ---------------------------------------------------------------------------
// Semi-Markov baseline

namespace {

constexpr int kIntervalBins = 25;
constexpr double kBinWidth = 2.0;
constexpr double kOverflowEdge = 48.0;

int interval_bin(double tau) {
    if (tau >= kOverflowEdge) {
        return kIntervalBins - 1;
    }
    const int b = static_cast<int>(tau / kBinWidth);
    return std::min(std::max(b, 0), kIntervalBins - 2);
}

int sample_categorical(const std::vector<double>& mass, RngStream& rng) {
    const double u = rng.uniform01();
    double c = 0.0;
    for (std::size_t i = 0; i < mass.size(); ++i) {
        c += mass[i];
        if (u < c) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(mass.size()) - 1;
}

double sample_interval(const SemiMarkovModel& model, int k, RngStream& rng) {
    const auto& mass = model.interval_mass[static_cast<std::size_t>(k)];
    const int b = sample_categorical(mass, rng);
    if (b < kIntervalBins - 1) {
        return (static_cast<double>(b) + rng.uniform01()) * kBinWidth;
    }
    const double hi = model.overflow_max[static_cast<std::size_t>(k)];
    return kOverflowEdge + rng.uniform01() * (hi - kOverflowEdge);
}

}  // namespace

SemiMarkovModel fit_semi_markov(const Corpus& corpus, const ActivityTaxonomy& tax) {
    const int M = tax.M;
    SemiMarkovModel model;
    model.M = M;
    std::vector<std::vector<double>> trans_counts(
        static_cast<std::size_t>(M), std::vector<double>(static_cast<std::size_t>(M), 0.0));
    std::vector<double> init_counts(static_cast<std::size_t>(M), 0.0);
    std::vector<std::vector<double>> interval_counts(
        static_cast<std::size_t>(M),
        std::vector<double>(static_cast<std::size_t>(kIntervalBins), 0.0));
    std::vector<double> global_counts(static_cast<std::size_t>(kIntervalBins), 0.0);
    model.overflow_max.assign(static_cast<std::size_t>(M), kOverflowEdge + kBinWidth);
    double global_overflow_max = kOverflowEdge + kBinWidth;

    std::size_t transitions = 0;
    for (const ActivitySequence& seq : corpus) {
        if (seq.events.empty()) {
            continue;
        }
        init_counts[static_cast<std::size_t>(seq.events[0].k)] += 1.0;
        for (std::size_t i = 1; i < seq.events.size(); ++i) {
            const int prev = seq.events[i - 1].k;
            const int next = seq.events[i].k;
            const double tau = seq.events[i].t - seq.events[i - 1].t;
            trans_counts[static_cast<std::size_t>(prev)][static_cast<std::size_t>(next)] +=
                1.0;
            interval_counts[static_cast<std::size_t>(next)]
                           [static_cast<std::size_t>(interval_bin(tau))] += 1.0;
            global_counts[static_cast<std::size_t>(interval_bin(tau))] += 1.0;
            if (tau >= kOverflowEdge) {
                model.overflow_max[static_cast<std::size_t>(next)] =
                    std::max(model.overflow_max[static_cast<std::size_t>(next)], tau);
                global_overflow_max = std::max(global_overflow_max, tau);
            }
            transitions += 1;
        }
    }
    if (transitions == 0) {
        throw ValidationError("semi-Markov fit requires at least one transition");
    }

    model.trans.assign(static_cast<std::size_t>(M),
                       std::vector<double>(static_cast<std::size_t>(M), 0.0));
    for (int a = 0; a < M; ++a) {
        double row_total = 0.0;
        for (int b = 0; b < M; ++b) {
            row_total += trans_counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
        }
        for (int b = 0; b < M; ++b) {
            model.trans[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] =
                (trans_counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] +
                 1.0) /
                (row_total + static_cast<double>(M));
        }
    }
    double init_total = 0.0;
    for (double c : init_counts) init_total += c;
    model.init_dist.resize(static_cast<std::size_t>(M));
    for (int k = 0; k < M; ++k) {
        model.init_dist[static_cast<std::size_t>(k)] =
            (init_counts[static_cast<std::size_t>(k)] + 1.0) /
            (init_total + static_cast<double>(M));
    }

    double global_total = 0.0;
    for (double c : global_counts) global_total += c;
    model.interval_mass.assign(static_cast<std::size_t>(M),
                               std::vector<double>(static_cast<std::size_t>(kIntervalBins),
                                                   0.0));
    for (int k = 0; k < M; ++k) {
        double total = 0.0;
        for (double c : interval_counts[static_cast<std::size_t>(k)]) total += c;
        if (total > 0.0) {
            for (int b = 0; b < kIntervalBins; ++b) {
                model.interval_mass[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)] =
                    interval_counts[static_cast<std::size_t>(k)]
                                   [static_cast<std::size_t>(b)] /
                    total;
            }
        } else {
            // No arrival interval ever observed for this type: fall back to
            // the pooled distribution.
            for (int b = 0; b < kIntervalBins; ++b) {
                model.interval_mass[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)] =
                    global_counts[static_cast<std::size_t>(b)] / global_total;
            }
            model.overflow_max[static_cast<std::size_t>(k)] = global_overflow_max;
        }
    }
    return model;
}

ActivitySequence generate_semi_markov(const SemiMarkovModel& model, std::int64_t start_ts,
                                      double horizon_T, RngStream& rng,
                                      const std::string& user_id) {
    ActivitySequence seq;
    seq.user_id = user_id;
    seq.start_ts = start_ts;
    seq.horizon_T = horizon_T;
    if (!(horizon_T > 0.0)) {
        return seq;
    }
    constexpr std::size_t kEventCap = 1000000;
    int k = sample_categorical(model.init_dist, rng);
    double t = 0.0;
    while (seq.events.size() < kEventCap) {
        t += sample_interval(model, k, rng);
        if (t >= horizon_T) {
            break;
        }
        seq.events.push_back(Event{t, k});
        k = sample_categorical(model.trans[static_cast<std::size_t>(k)], rng);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Hawkes baseline

namespace {

double softplus_inv(double y) {
    if (y > 30.0) {
        return y;
    }
    return std::log(std::expm1(std::max(y, 1e-12)));
}

struct HawkesRaw {
    std::vector<double> a;               // mu = softplus(a)
    std::vector<std::vector<double>> b;  // alpha = softplus(b)
    double c = 0.0;                      // beta = softplus(c)
};

HawkesModel raw_to_model(const HawkesRaw& raw, int M) {
    HawkesModel m;
    m.M = M;
    m.mu.resize(static_cast<std::size_t>(M));
    m.alpha.assign(static_cast<std::size_t>(M),
                   std::vector<double>(static_cast<std::size_t>(M), 0.0));
    for (int k = 0; k < M; ++k) {
        m.mu[static_cast<std::size_t>(k)] =
            net::kernels::softplus(raw.a[static_cast<std::size_t>(k)]);
        for (int j = 0; j < M; ++j) {
            m.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] =
                net::kernels::softplus(raw.b[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
        }
    }
    m.beta = net::kernels::softplus(raw.c);
    return m;
}

struct HawkesGrad {
    std::vector<double> mu;
    std::vector<std::vector<double>> alpha;
    double beta = 0.0;
};

// Log-likelihood and gradient w.r.t. (mu, alpha, beta) via the standard
// per-source-type exponential recursions.
double hawkes_ll_grad(const HawkesModel& m, const Corpus& corpus, HawkesGrad* grad) {
    const int M = m.M;
    if (grad != nullptr) {
        grad->mu.assign(static_cast<std::size_t>(M), 0.0);
        grad->alpha.assign(static_cast<std::size_t>(M),
                           std::vector<double>(static_cast<std::size_t>(M), 0.0));
        grad->beta = 0.0;
    }
    double ll = 0.0;
    std::vector<double> R(static_cast<std::size_t>(M), 0.0);
    std::vector<double> S(static_cast<std::size_t>(M), 0.0);
    for (const ActivitySequence& seq : corpus) {
        std::fill(R.begin(), R.end(), 0.0);
        std::fill(S.begin(), S.end(), 0.0);
        double prev_t = 0.0;
        bool first = true;
        for (const Event& e : seq.events) {
            if (!first) {
                const double dt = e.t - prev_t;
                const double decay = std::exp(-m.beta * dt);
                for (int j = 0; j < M; ++j) {
                    S[static_cast<std::size_t>(j)] =
                        decay * (S[static_cast<std::size_t>(j)] -
                                 dt * R[static_cast<std::size_t>(j)]);
                    R[static_cast<std::size_t>(j)] *= decay;
                }
            }
            const int k = e.k;
            double lam = m.mu[static_cast<std::size_t>(k)];
            double dlam_dbeta = 0.0;
            for (int j = 0; j < M; ++j) {
                lam += m.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] *
                       R[static_cast<std::size_t>(j)];
                dlam_dbeta +=
                    m.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] *
                    S[static_cast<std::size_t>(j)];
            }
            lam = std::max(lam, 1e-12);
            ll += std::log(lam);
            if (grad != nullptr) {
                grad->mu[static_cast<std::size_t>(k)] += 1.0 / lam;
                for (int j = 0; j < M; ++j) {
                    grad->alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] +=
                        R[static_cast<std::size_t>(j)] / lam;
                }
                grad->beta += dlam_dbeta / lam;
            }
            R[static_cast<std::size_t>(k)] += 1.0;
            prev_t = e.t;
            first = false;
        }
        const double T = seq.horizon_T;
        for (int k = 0; k < M; ++k) {
            ll -= m.mu[static_cast<std::size_t>(k)] * T;
            if (grad != nullptr) {
                grad->mu[static_cast<std::size_t>(k)] -= T;
            }
        }
        for (const Event& e : seq.events) {
            const double u = T - e.t;
            const double eu = std::exp(-m.beta * u);
            const double integ = (1.0 - eu) / m.beta;
            const double dinteg_dbeta = u * eu / m.beta - (1.0 - eu) / (m.beta * m.beta);
            for (int k = 0; k < M; ++k) {
                const double a =
                    m.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(e.k)];
                ll -= a * integ;
                if (grad != nullptr) {
                    grad->alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(e.k)] -=
                        integ;
                    grad->beta -= a * dinteg_dbeta;
                }
            }
        }
    }
    return ll;
}

double spectral_radius(const std::vector<std::vector<double>>& mat) {
    const std::size_t n = mat.size();
    std::vector<double> v(n, 1.0);
    double lam = 0.0;
    for (int it = 0; it < 200; ++it) {
        std::vector<double> w(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                w[i] += mat[i][j] * v[j];
            }
        }
        double norm = 0.0;
        for (double x : w) norm = std::max(norm, std::abs(x));
        if (!(norm > 0.0)) {
            return 0.0;
        }
        for (double& x : w) x /= norm;
        lam = norm;
        v = std::move(w);
    }
    return lam;
}

}  // namespace

double hawkes_log_likelihood(const HawkesModel& model, const Corpus& corpus) {
    return hawkes_ll_grad(model, corpus, nullptr);
}

HawkesModel fit_hawkes(const Corpus& corpus, const ActivityTaxonomy& tax,
                       int iterations) {
    const int M = tax.M;
    HawkesRaw raw;
    raw.a.resize(static_cast<std::size_t>(M));
    raw.b.assign(static_cast<std::size_t>(M),
                 std::vector<double>(static_cast<std::size_t>(M), softplus_inv(0.01)));
    std::vector<double> counts(static_cast<std::size_t>(M), 0.0);
    double total_T = 0.0;
    for (const ActivitySequence& seq : corpus) {
        total_T += seq.horizon_T;
        for (const Event& e : seq.events) {
            counts[static_cast<std::size_t>(e.k)] += 1.0;
        }
    }
    if (!(total_T > 0.0)) {
        throw ValidationError("Hawkes fit requires positive total observation time");
    }
    for (int k = 0; k < M; ++k) {
        const double rate = counts[static_cast<std::size_t>(k)] / total_T;
        raw.a[static_cast<std::size_t>(k)] = softplus_inv(std::max(rate, 1e-4));
    }
    raw.c = softplus_inv(1.0);

    HawkesModel model = raw_to_model(raw, M);
    double ll = hawkes_ll_grad(model, corpus, nullptr);
    double lr = 1e-3;
    for (int it = 0; it < iterations; ++it) {
        HawkesGrad grad;
        hawkes_ll_grad(model, corpus, &grad);
        // Chain through the softplus reparameterization.
        HawkesRaw raw_grad;
        raw_grad.a.resize(static_cast<std::size_t>(M));
        raw_grad.b.assign(static_cast<std::size_t>(M),
                          std::vector<double>(static_cast<std::size_t>(M), 0.0));
        for (int k = 0; k < M; ++k) {
            raw_grad.a[static_cast<std::size_t>(k)] =
                grad.mu[static_cast<std::size_t>(k)] *
                net::kernels::sigmoid(raw.a[static_cast<std::size_t>(k)]);
            for (int j = 0; j < M; ++j) {
                raw_grad.b[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] =
                    grad.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] *
                    net::kernels::sigmoid(
                        raw.b[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
            }
        }
        raw_grad.c = grad.beta * net::kernels::sigmoid(raw.c);

        bool improved = false;
        for (int tries = 0; tries < 30; ++tries) {
            HawkesRaw trial = raw;
            for (int k = 0; k < M; ++k) {
                trial.a[static_cast<std::size_t>(k)] +=
                    lr * raw_grad.a[static_cast<std::size_t>(k)];
                for (int j = 0; j < M; ++j) {
                    trial.b[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] +=
                        lr * raw_grad.b[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
                }
            }
            trial.c += lr * raw_grad.c;
            const HawkesModel trial_model = raw_to_model(trial, M);
            const double trial_ll = hawkes_ll_grad(trial_model, corpus, nullptr);
            if (trial_ll >= ll) {
                raw = trial;
                model = trial_model;
                ll = trial_ll;
                lr *= 1.5;
                improved = true;
                break;
            }
            lr *= 0.5;
        }
        if (!improved) {
            break;
        }
    }

    for (double& m : model.mu) {
        m = std::max(m, 1e-6);
    }
    std::vector<std::vector<double>> branching(
        static_cast<std::size_t>(M), std::vector<double>(static_cast<std::size_t>(M), 0.0));
    for (int k = 0; k < M; ++k) {
        for (int j = 0; j < M; ++j) {
            branching[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] =
                model.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] /
                model.beta;
        }
    }
    model.explosive_warning = spectral_radius(branching) >= 1.0;
    return model;
}

ActivitySequence generate_hawkes(const HawkesModel& model, std::int64_t start_ts,
                                 double horizon_T, RngStream& rng,
                                 const std::string& user_id) {
    ActivitySequence seq;
    seq.user_id = user_id;
    seq.start_ts = start_ts;
    seq.horizon_T = horizon_T;
    if (!(horizon_T > 0.0)) {
        return seq;
    }
    const int M = model.M;
    std::vector<double> R(static_cast<std::size_t>(M), 0.0);
    std::vector<double> lam(static_cast<std::size_t>(M), 0.0);
    double mu_total = 0.0;
    for (double m : model.mu) mu_total += m;
    auto total_at = [&]() {
        double total = 0.0;
        for (int k = 0; k < M; ++k) {
            double v = model.mu[static_cast<std::size_t>(k)];
            for (int j = 0; j < M; ++j) {
                v += model.alpha[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] *
                     R[static_cast<std::size_t>(j)];
            }
            lam[static_cast<std::size_t>(k)] = v;
            total += v;
        }
        return total;
    };
    double t = 0.0;
    double bound = total_at();
    constexpr long kGuard = 10000000;
    long draws = 0;
    while (true) {
        if (++draws > kGuard) {
            throw StallError("Hawkes sampler exceeded its candidate budget");
        }
        const double w = rng.exponential(bound);
        const double s = t + w;
        if (s >= horizon_T) {
            break;
        }
        const double decay = std::exp(-model.beta * (s - t));
        for (double& r : R) r *= decay;
        t = s;
        const double total = total_at();
        if (rng.uniform01() * bound < total) {
            const double u = rng.uniform01() * total;
            double c = 0.0;
            int k = M - 1;
            for (int j = 0; j < M; ++j) {
                c += lam[static_cast<std::size_t>(j)];
                if (u < c) {
                    k = j;
                    break;
                }
            }
            seq.events.push_back(Event{t, k});
            R[static_cast<std::size_t>(k)] += 1.0;
            bound = total_at();
        } else {
            bound = total;
        }
    }
    return seq;
}

}  // namespace sand::train
