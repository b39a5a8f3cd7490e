#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sand {

// Contract violations (bad arguments, broken invariants). CLI exit code 1.
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Input data that fails parsing or validation. CLI exit code 1.
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Non-finite state during integration or training. CLI exit code 2.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Thinning sampler exceeded its candidate budget; indicates a
// misconfigured intensity.
class StallError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// One timestamped activity. `t` is elapsed hours since sequence start.
struct Event {
    double t = 0.0;
    int k = 0;
};

struct ActivitySequence {
    std::string user_id;
    std::int64_t start_ts = 0;  // absolute UTC epoch seconds
    double horizon_T = 0.0;     // hours
    std::vector<Event> events;  // strictly increasing in t, all t < horizon_T
};

using Corpus = std::vector<ActivitySequence>;

struct ActivityTaxonomy {
    int M = 0;
    std::vector<std::string> names;   // size M
    std::vector<int> need_level;      // size M, entries in {1,2,3}

    void validate() const;
};

// Deterministic counter-based stream (splitmix64 core). Identical
// (seed, stream_id) reproduces the same draws on every platform.
class RngStream {
  public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id);

    std::uint64_t next_u64();
    double uniform01();                  // [0, 1)
    double uniform(double lo, double hi);
    double exponential(double rate);     // rate > 0
    std::uint64_t below(std::uint64_t n);  // unbiased in [0, n)

  private:
    std::uint64_t state_;
};

// Flat run configuration. Every key is overridable from JSON or
// `--set key=value` on the CLI.
struct Config {
    int internal_dim = 16;        // per-level internal state width
    int memory_dim = 16;          // per-level activity-memory width
    int activity_embed_dim = 8;
    int feature_embed_dim = 8;
    int hidden = 32;
    int depth = 1;                // hidden layers per MLP
    double delta = 0.1;           // integrator step, hours
    double horizon_T = 168.0;
    std::int64_t start_ts = 1474243200;
    double lambda_min = 1e-6;
    double lambda_max = 50.0;
    int max_events = 200;
    double lookahead_hours = 2.0;
    double bound_multiplier = 2.0;
    int history_window = 32;
    double lr_pretrain = 5e-3;
    double lr_policy = 1e-4;
    double lr_disc = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 16;
    int pretrain_epochs = 30;
    int gail_iterations = 200;
    double grad_clip = 5.0;
    double label_smoothing = 0.9;
    bool disable_need_hierarchy = false;
    bool disable_gail = false;
    bool disable_pretrain = false;
    bool scalar_decay = false;    // one decay rate per level instead of per component
    std::uint64_t seed = 42;

    void validate() const;

    // Number of modeled need levels (1 when the hierarchy is disabled).
    int levels() const { return disable_need_hierarchy ? 1 : 3; }

    static Config from_json_file(const std::string& path);
    std::string to_json() const;
    void set_key(const std::string& key, const std::string& value);
    // FNV-1a over the canonical JSON dump.
    std::string hash() const;
};

struct Violation {
    std::string message;
};

// Calendar context of an event, derived from start_ts + t in UTC.
struct CalendarFeatures {
    int hour = 0;     // [0, 24)
    int weekday = 0;  // [0, 7), 0 = Monday
};

CalendarFeatures calendar_features(std::int64_t start_ts, double t_hours);

// Need level in {1,2,3} for activity type k. Throws ContractError if k
// is out of range.
int need_level_of(const ActivityTaxonomy& tax, int k);

// ok iff empty.
std::vector<Violation> validate_sequence(const ActivitySequence& seq,
                                         const ActivityTaxonomy& tax);

// JSONL corpus I/O. One sequence per line, keys exactly
// {user_id, start_ts, horizon_T, events}; unknown keys rejected.
Corpus parse_dataset(const std::string& path, const ActivityTaxonomy& tax);
Corpus parse_dataset_text(const std::string& text, const ActivityTaxonomy& tax);
std::string serialize_dataset(const Corpus& corpus);
void write_dataset(const Corpus& corpus, const std::string& path);

ActivityTaxonomy load_taxonomy(const std::string& path);
ActivityTaxonomy default_taxonomy();

// Write content to path atomically (temp file + rename).
void atomic_write(const std::string& path, const std::string& content);

}  // namespace sand
