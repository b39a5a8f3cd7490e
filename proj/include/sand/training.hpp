#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sand/core.hpp"
#include "sand/discriminator.hpp"
#include "sand/dynamics.hpp"
#include "sand/net.hpp"
#include "sand/policy.hpp"

namespace sand::train {

// The full parameter set plus wiring. Not movable: the wiring holds a
// pointer to the owned store.
struct Model {
    Config cfg;
    ActivityTaxonomy tax;
    net::ParamStore store;
    dyn::DynamicsNets nets;
    policy::IntensityHead head;
    disc::Discriminator discr;

    Model(const Config& cfg, const ActivityTaxonomy& tax);
    Model(const Config& cfg, const ActivityTaxonomy& tax, net::ParamStore&& loaded);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    std::vector<std::string> generator_names() const;      // dyn.* and policy.*
    std::vector<std::string> discriminator_names() const;  // disc.*

    void save(const std::string& path) const;
    static std::unique_ptr<Model> load(const Config& cfg, const ActivityTaxonomy& tax,
                                       const std::string& path);
};

struct TrainReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    double wall_clock_seconds = 0.0;
    std::vector<double> pretrain_nll;  // per epoch
    std::vector<double> disc_loss;     // per iteration
    std::vector<double> policy_loss;   // per iteration
    std::vector<double> mean_reward;   // per iteration
    std::string aborted_reason;        // empty on clean completion

    std::string to_json() const;
};

// Called once per pretrain epoch / adversarial iteration with a one-line
// JSON progress object.
using ProgressFn = std::function<void(const std::string&)>;

// Maximum-likelihood pre-training of the dynamics and intensity head.
// On numerical divergence the last completed epoch's parameters are
// restored and the report notes the abort.
void pretrain_mle(Model& model, const Corpus& corpus, TrainReport& report,
                  const ProgressFn& progress = {});

// Alternating adversarial training: one discriminator step (BCE, real
// label smoothed to 0.9) then one policy step (score-function gradient
// with a batch-mean baseline). disable_gail returns with parameters
// untouched.
void train_gail(Model& model, const Corpus& corpus, TrainReport& report,
                const ProgressFn& progress = {});

// Discriminator-only steps against a frozen generator; returns the AUC
// measured on each iteration's batch.
std::vector<double> train_discriminator_only(Model& model, const Corpus& corpus,
                                             int iterations,
                                             const ProgressFn& progress = {});

// Replay of one sequence through the current dynamics: flattened z(t_i)
// at each event (pre-jump) plus the discriminator's feature view.
struct ScoredSequence {
    std::vector<std::vector<double>> z;
    std::vector<disc::HistoryEntry> entries;
    std::vector<Event> events;
};

ScoredSequence make_scored(const dyn::DynamicsNets& nets, const ActivityTaxonomy& tax,
                           const ActivitySequence& seq);

// P(score(real) > score(fake)) over all cross pairs, ties counted half.
double ranking_auc(const std::vector<double>& real_scores,
                   const std::vector<double>& fake_scores);

// Classical baseline: type transition chain plus per-arriving-type
// interval histograms on the shared evaluation bins.
struct SemiMarkovModel {
    int M = 0;
    std::vector<std::vector<double>> trans;          // M x M, row-stochastic
    std::vector<double> init_dist;                   // first-event type distribution
    std::vector<std::vector<double>> interval_mass;  // M x 25, normalized
    std::vector<double> overflow_max;                // per type, upper edge of [48, ...]
};

SemiMarkovModel fit_semi_markov(const Corpus& corpus, const ActivityTaxonomy& tax);
ActivitySequence generate_semi_markov(const SemiMarkovModel& model, std::int64_t start_ts,
                                      double horizon_T, RngStream& rng,
                                      const std::string& user_id = "sm");

// Classical baseline: multivariate Hawkes with exponential kernels
// alpha_{k,k'} e^{-beta t} and shared decay.
struct HawkesModel {
    int M = 0;
    std::vector<double> mu;                  // per-type base rate, > 0
    std::vector<std::vector<double>> alpha;  // M x M excitation, > 0
    double beta = 1.0;
    bool explosive_warning = false;  // spectral radius of alpha/beta >= 1
};

HawkesModel fit_hawkes(const Corpus& corpus, const ActivityTaxonomy& tax,
                       int iterations = 300);
double hawkes_log_likelihood(const HawkesModel& model, const Corpus& corpus);
ActivitySequence generate_hawkes(const HawkesModel& model, std::int64_t start_ts,
                                 double horizon_T, RngStream& rng,
                                 const std::string& user_id = "hawkes");

}  // namespace sand::train
