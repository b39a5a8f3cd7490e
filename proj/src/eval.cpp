#include "sand/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace sand::eval {

namespace {

using nlohmann::json;

constexpr double kIntervalBinWidth = 2.0;
constexpr int kIntervalBins = 25;  // 24 uniform over [0,48) + overflow
constexpr int kDailyActBins = 21;  // counts 0..19 + overflow

std::vector<std::string> interval_labels() {
    std::vector<std::string> labels;
    for (int b = 0; b < 24; ++b) {
        labels.push_back("[" + std::to_string(2 * b) + "," + std::to_string(2 * b + 2) + ")");
    }
    labels.push_back("[48,inf)");
    return labels;
}

int interval_bin(double tau) {
    if (tau >= 48.0) {
        return 24;
    }
    const int b = static_cast<int>(tau / kIntervalBinWidth);
    return std::min(std::max(b, 0), 23);
}

MetricHistogram normalized(MetricKind kind, std::vector<std::string> labels,
                           const std::vector<double>& counts, const std::string& detail) {
    double total = 0.0;
    for (double c : counts) total += c;
    if (!(total > 0.0)) {
        throw ValidationError("no observations for metric " + metric_name(kind) + detail);
    }
    MetricHistogram h;
    h.kind = kind;
    h.labels = std::move(labels);
    h.mass.resize(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        h.mass[i] = counts[i] / total;
    }
    return h;
}

std::vector<double> interval_counts(const Corpus& corpus, int type_filter) {
    std::vector<double> counts(kIntervalBins, 0.0);
    for (const ActivitySequence& seq : corpus) {
        double prev = std::numeric_limits<double>::quiet_NaN();
        for (const Event& e : seq.events) {
            if (type_filter >= 0 && e.k != type_filter) {
                continue;
            }
            if (!std::isnan(prev)) {
                counts[static_cast<std::size_t>(interval_bin(e.t - prev))] += 1.0;
            }
            prev = e.t;
        }
    }
    return counts;
}

}  // namespace

std::string metric_name(MetricKind kind) {
    switch (kind) {
        case MetricKind::kMacroInt: return "macro_int";
        case MetricKind::kMicroInt: return "micro_int";
        case MetricKind::kDailyAct: return "daily_act";
        case MetricKind::kActType: return "act_type";
        case MetricKind::kWeekday: return "weekday";
        case MetricKind::kHour: return "hour";
    }
    return "unknown";
}

MetricHistogram histogram(const Corpus& corpus, MetricKind kind,
                          const ActivityTaxonomy& tax, int micro_type) {
    switch (kind) {
        case MetricKind::kMacroInt:
            return normalized(kind, interval_labels(), interval_counts(corpus, -1), "");
        case MetricKind::kMicroInt: {
            if (micro_type < 0 || micro_type >= tax.M) {
                throw ContractError("micro_int histogram needs a valid type");
            }
            return normalized(kind, interval_labels(), interval_counts(corpus, micro_type),
                              " (type " + tax.names[static_cast<std::size_t>(micro_type)] +
                                  ")");
        }
        case MetricKind::kDailyAct: {
            std::vector<double> counts(kDailyActBins, 0.0);
            for (const ActivitySequence& seq : corpus) {
                const int n_days = static_cast<int>(std::ceil(seq.horizon_T / 24.0));
                std::vector<int> per_day(static_cast<std::size_t>(std::max(n_days, 0)), 0);
                for (const Event& e : seq.events) {
                    const int d = std::min(static_cast<int>(e.t / 24.0), n_days - 1);
                    if (d >= 0) {
                        per_day[static_cast<std::size_t>(d)] += 1;
                    }
                }
                for (int c : per_day) {
                    counts[static_cast<std::size_t>(std::min(c, kDailyActBins - 1))] += 1.0;
                }
            }
            std::vector<std::string> labels;
            for (int b = 0; b < kDailyActBins - 1; ++b) {
                labels.push_back(std::to_string(b));
            }
            labels.push_back(">=20");
            return normalized(kind, std::move(labels), counts, "");
        }
        case MetricKind::kActType: {
            std::vector<double> counts(static_cast<std::size_t>(tax.M), 0.0);
            for (const ActivitySequence& seq : corpus) {
                for (const Event& e : seq.events) {
                    counts[static_cast<std::size_t>(e.k)] += 1.0;
                }
            }
            return normalized(kind, tax.names, counts, "");
        }
        case MetricKind::kWeekday:
        case MetricKind::kHour: {
            const bool weekday = kind == MetricKind::kWeekday;
            std::vector<double> counts(weekday ? 7 : 24, 0.0);
            for (const ActivitySequence& seq : corpus) {
                for (const Event& e : seq.events) {
                    const CalendarFeatures cal = calendar_features(seq.start_ts, e.t);
                    counts[static_cast<std::size_t>(weekday ? cal.weekday : cal.hour)] += 1.0;
                }
            }
            std::vector<std::string> labels;
            for (std::size_t i = 0; i < counts.size(); ++i) {
                labels.push_back(std::to_string(i));
            }
            return normalized(kind, std::move(labels), counts, "");
        }
    }
    throw ContractError("unknown metric kind");
}

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size() || p.empty()) {
        throw ContractError("jsd requires equal-length non-empty mass vectors");
    }
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) {
            throw ContractError("jsd requires non-negative masses");
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9) {
        throw ContractError("jsd requires normalized mass vectors");
    }
    auto ent = [](double x) { return x > 0.0 ? -x * std::log2(x) : 0.0; };
    double hm = 0.0;
    double hp = 0.0;
    double hq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        hm += ent(0.5 * (p[i] + q[i]));
        hp += ent(p[i]);
        hq += ent(q[i]);
    }
    const double v = hm - 0.5 * (hp + hq);
    return std::min(1.0, std::max(0.0, v));
}

EvalReport evaluate(const Corpus& gen, const Corpus& real, const ActivityTaxonomy& tax) {
    EvalReport rep;
    rep.gen_sequences = gen.size();
    rep.real_sequences = real.size();
    auto pairwise = [&](MetricKind kind) {
        return jsd(histogram(gen, kind, tax).mass, histogram(real, kind, tax).mass);
    };
    rep.macro_int = pairwise(MetricKind::kMacroInt);
    rep.daily_act = pairwise(MetricKind::kDailyAct);
    rep.act_type = pairwise(MetricKind::kActType);
    rep.weekday = pairwise(MetricKind::kWeekday);
    rep.hour = pairwise(MetricKind::kHour);

    double micro_sum = 0.0;
    int micro_types = 0;
    for (int k = 0; k < tax.M; ++k) {
        MetricHistogram real_h;
        try {
            real_h = histogram(real, MetricKind::kMicroInt, tax, k);
        } catch (const ValidationError&) {
            continue;  // type not present in the real corpus
        }
        ++micro_types;
        try {
            const MetricHistogram gen_h = histogram(gen, MetricKind::kMicroInt, tax, k);
            micro_sum += jsd(gen_h.mass, real_h.mass);
        } catch (const ValidationError&) {
            micro_sum += 1.0;
            rep.warnings.push_back("micro_int: no " +
                                   tax.names[static_cast<std::size_t>(k)] +
                                   " recurrence intervals in generated corpus");
        }
    }
    if (micro_types == 0) {
        throw ValidationError("no observations for metric micro_int in real corpus");
    }
    rep.micro_int = micro_sum / micro_types;
    return rep;
}

std::string EvalReport::to_json() const {
    json j;
    j["macro_int"] = macro_int;
    j["micro_int"] = micro_int;
    j["daily_act"] = daily_act;
    j["act_type"] = act_type;
    j["weekday"] = weekday;
    j["hour"] = hour;
    j["warnings"] = warnings;
    j["gen_sequences"] = gen_sequences;
    j["real_sequences"] = real_sequences;
    j["config_hash"] = config_hash;
    return j.dump(2);
}

EvalReport parse_eval_report(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError("eval report parse error: " + std::string(e.what()));
    }
    EvalReport rep;
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        try {
            if (key == "macro_int") rep.macro_int = v.get<double>();
            else if (key == "micro_int") rep.micro_int = v.get<double>();
            else if (key == "daily_act") rep.daily_act = v.get<double>();
            else if (key == "act_type") rep.act_type = v.get<double>();
            else if (key == "weekday") rep.weekday = v.get<double>();
            else if (key == "hour") rep.hour = v.get<double>();
            else if (key == "warnings") rep.warnings = v.get<std::vector<std::string>>();
            else if (key == "gen_sequences") rep.gen_sequences = v.get<std::size_t>();
            else if (key == "real_sequences") rep.real_sequences = v.get<std::size_t>();
            else if (key == "config_hash") rep.config_hash = v.get<std::string>();
            else throw ValidationError("eval report: unknown key \"" + key + "\"");
        } catch (const json::exception& e) {
            throw ValidationError("eval report: bad value for \"" + key + "\": " + e.what());
        }
    }
    return rep;
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

void export_intensity_trace(const dyn::DynamicsNets& nets,
                            const policy::IntensityHead& head,
                            const ActivityTaxonomy& tax, const ActivitySequence& seq,
                            double delta, const std::string& path) {
    if (!(delta > 0.0)) {
        throw ContractError("trace delta must be > 0");
    }
    std::ostringstream out;
    out << "t,lambda_l1,lambda_l2,lambda_l3,event_k\n";
    auto emit = [&](double t, const dyn::NeedState& state, int event_k) {
        const std::vector<double> lam = policy::intensities(head, state);
        double level_sum[3] = {0.0, 0.0, 0.0};
        for (int k = 0; k < tax.M; ++k) {
            level_sum[tax.need_level[static_cast<std::size_t>(k)] - 1] +=
                lam[static_cast<std::size_t>(k)];
        }
        out << fmt_double(t) << ',' << fmt_double(level_sum[0]) << ','
            << fmt_double(level_sum[1]) << ',' << fmt_double(level_sum[2]) << ',';
        if (event_k >= 0) {
            out << event_k;
        }
        out << '\n';
    };

    dyn::NeedState cur = dyn::initial_state(nets);
    const long long k_max = static_cast<long long>(std::floor(seq.horizon_T / delta));
    long long k = 0;
    std::size_t ev = 0;
    const double inf = std::numeric_limits<double>::infinity();
    while (k <= k_max || ev < seq.events.size()) {
        const double tg = k <= k_max ? static_cast<double>(k) * delta : inf;
        const double te = ev < seq.events.size() ? seq.events[ev].t : inf;
        if (tg <= te) {
            cur = dyn::integrate_flow(nets, cur, cur.t, tg);
            emit(tg, cur, -1);
            ++k;
        } else {
            cur = dyn::integrate_flow(nets, cur, cur.t, te);
            cur = dyn::apply_jump(nets, cur, seq.events[ev].k);
            cur.t = te;
            emit(te, cur, seq.events[ev].k);
            ++ev;
        }
    }
    atomic_write(path, out.str());
}

}  // namespace sand::eval
