#pragma once

#include <span>
#include <string>
#include <vector>

#include "sand/core.hpp"
#include "sand/dynamics.hpp"
#include "sand/net.hpp"

namespace sand::disc {

// Calendar-contextualized view of one event, as the discriminator sees it.
struct HistoryEntry {
    double tau = 0.0;  // hours since the previous event (or since t = 0)
    int hour = 0;
    int weekday = 0;
    int k = 0;
    int level = 0;  // 0-based need level index
};

// D_phi over (state, action) pairs. Feature tables, attention pooling and
// the scoring MLP live under "disc.*". The scoring logit is clamped so D
// stays strictly inside (0,1) and R = log D stays finite.
struct Discriminator {
    net::ParamStore* store = nullptr;
    int M = 0;
    int feat_dim = 8;
    int state_dim = 0;    // flattened z(t) length
    int entry_dim = 0;    // 1 + 4 * feat_dim
    int context_dim = 0;  // attention output width
    int history_window = 32;
    net::AttentionSpec att_spec;
    net::MlpSpec score_spec;

    std::string hour_table() const { return "disc.hour"; }
    std::string weekday_table() const { return "disc.weekday"; }
    std::string type_table() const { return "disc.type"; }
    std::string level_table() const { return "disc.level"; }
    std::string empty_name() const { return "disc.empty"; }
    std::string att_prefix() const { return "disc.att"; }
    std::string score_prefix() const { return "disc.score"; }
};

Discriminator make_discriminator(const Config& cfg, const ActivityTaxonomy& tax,
                                 net::ParamStore& store, RngStream& rng);
Discriminator attach_discriminator(const Config& cfg, const ActivityTaxonomy& tax,
                                   net::ParamStore& store);

// One entry per event: interval since the previous event plus calendar
// context at the event time.
std::vector<HistoryEntry> history_entries(const ActivitySequence& seq,
                                          const ActivityTaxonomy& tax);

// The prefix the discriminator sees when scoring action i: the most
// recent min(i, history_window) entries.
std::span<const HistoryEntry> history_prefix(const std::vector<HistoryEntry>& entries,
                                             std::size_t i, int window);

// Attention-pooled context; empty prefix maps to the learned
// empty-history vector.
std::vector<double> encode_history(const Discriminator& model,
                                   std::span<const HistoryEntry> prefix);

// D in (0,1). z is the flattened need state at the action time.
double score(const Discriminator& model, const std::vector<double>& z,
             std::span<const HistoryEntry> prefix, double tau, int k);

// R = log D; always negative.
double reward(const Discriminator& model, const std::vector<double>& z,
              std::span<const HistoryEntry> prefix, double tau, int k);

// Tape path for discriminator updates. z enters as a constant input.
net::Tape::Var tape_score(net::Tape& tape, const Discriminator& model,
                          const std::vector<double>& z,
                          std::span<const HistoryEntry> prefix, double tau, int k);

}  // namespace sand::disc
