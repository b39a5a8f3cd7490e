#pragma once

#include <string>
#include <vector>

#include "sand/core.hpp"
#include "sand/dynamics.hpp"
#include "sand/policy.hpp"

namespace sand::eval {

enum class MetricKind { kMacroInt, kMicroInt, kDailyAct, kActType, kWeekday, kHour };

std::string metric_name(MetricKind kind);

struct MetricHistogram {
    MetricKind kind;
    std::vector<std::string> labels;
    std::vector<double> mass;  // normalized, sums to 1
};

// Builds the normalized histogram for one metric. MicroInt is per type:
// pass the type as micro_type. Throws a validation error naming the
// metric when the corpus has no relevant observation.
MetricHistogram histogram(const Corpus& corpus, MetricKind kind,
                          const ActivityTaxonomy& tax, int micro_type = -1);

// Jensen-Shannon divergence, base-2 logarithm, bounded [0,1].
double jsd(const std::vector<double>& p, const std::vector<double>& q);

struct EvalReport {
    double macro_int = 0.0;
    double micro_int = 0.0;
    double daily_act = 0.0;
    double act_type = 0.0;
    double weekday = 0.0;
    double hour = 0.0;
    std::vector<std::string> warnings;
    std::size_t gen_sequences = 0;
    std::size_t real_sequences = 0;
    std::string config_hash;

    double mean() const {
        return (macro_int + micro_int + daily_act + act_type + weekday + hour) / 6.0;
    }
    std::string to_json() const;
};

EvalReport parse_eval_report(const std::string& text);

EvalReport evaluate(const Corpus& gen, const Corpus& real, const ActivityTaxonomy& tax);

// CSV rows (t, per-level intensity sums, event marker) on the delta grid,
// plus one row per event carrying the post-jump intensities.
void export_intensity_trace(const dyn::DynamicsNets& nets,
                            const policy::IntensityHead& head,
                            const ActivityTaxonomy& tax, const ActivitySequence& seq,
                            double delta, const std::string& path);

}  // namespace sand::eval
