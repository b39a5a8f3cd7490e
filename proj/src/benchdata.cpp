#include "sand/benchdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sand::bench {

namespace {
using nlohmann::json;
}

void GroundTruthSpec::validate(const ActivityTaxonomy& tax) const {
    if (n_users < 1) {
        throw ValidationError("ground truth spec: n_users must be >= 1");
    }
    if (!(horizon_T > 0.0)) {
        throw ValidationError("ground truth spec: horizon_T must be > 0");
    }
    if (hourly_rate.size() != static_cast<std::size_t>(tax.M)) {
        throw ValidationError("ground truth spec: hourly_rate needs one row per type");
    }
    for (const auto& row : hourly_rate) {
        if (row.size() != 24) {
            throw ValidationError("ground truth spec: each hourly_rate row needs 24 values");
        }
        for (double r : row) {
            if (!(r > 0.0)) {
                throw ValidationError("ground truth spec: rates must be positive");
            }
        }
    }
    if (weekday_mult.size() != 7) {
        throw ValidationError("ground truth spec: weekday_mult needs 7 values");
    }
    for (double m : weekday_mult) {
        if (!(m > 0.0)) {
            throw ValidationError("ground truth spec: weekday multipliers must be positive");
        }
    }
    if (refractory_rho.size() != static_cast<std::size_t>(tax.M)) {
        throw ValidationError("ground truth spec: refractory_rho needs one value per type");
    }
    for (double rho : refractory_rho) {
        if (!(rho > 0.0)) {
            throw ValidationError("ground truth spec: refractory scales must be positive");
        }
    }
}

GroundTruthSpec parse_ground_truth(const std::string& text, const ActivityTaxonomy& tax) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError("ground truth spec parse error: " + std::string(e.what()));
    }
    GroundTruthSpec spec;
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        try {
            if (key == "n_users") spec.n_users = v.get<int>();
            else if (key == "horizon_T") spec.horizon_T = v.get<double>();
            else if (key == "start_ts") spec.start_ts = v.get<std::int64_t>();
            else if (key == "hourly_rate") spec.hourly_rate = v.get<std::vector<std::vector<double>>>();
            else if (key == "weekday_mult") spec.weekday_mult = v.get<std::vector<double>>();
            else if (key == "refractory_rho") spec.refractory_rho = v.get<std::vector<double>>();
            else throw ValidationError("ground truth spec: unknown key \"" + key + "\"");
        } catch (const json::exception& e) {
            throw ValidationError("ground truth spec: bad value for \"" + key + "\": " +
                                  e.what());
        }
    }
    spec.validate(tax);
    return spec;
}

GroundTruthSpec load_ground_truth(const std::string& path, const ActivityTaxonomy& tax) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open ground truth spec: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_ground_truth(buf.str(), tax);
}

std::string serialize_ground_truth(const GroundTruthSpec& spec) {
    json j;
    j["n_users"] = spec.n_users;
    j["horizon_T"] = spec.horizon_T;
    j["start_ts"] = spec.start_ts;
    j["hourly_rate"] = spec.hourly_rate;
    j["weekday_mult"] = spec.weekday_mult;
    j["refractory_rho"] = spec.refractory_rho;
    return j.dump(2);
}

namespace {

ActivitySequence generate_one(const GroundTruthSpec& spec, int user_index,
                              double horizon_T, std::uint64_t seed) {
    const std::size_t M = spec.hourly_rate.size();
    double bound = 0.0;
    double wd_max = 0.0;
    for (double m : spec.weekday_mult) {
        wd_max = std::max(wd_max, m);
    }
    for (const auto& row : spec.hourly_rate) {
        bound += *std::max_element(row.begin(), row.end());
    }
    bound *= wd_max;

    RngStream rng(seed, static_cast<std::uint64_t>(user_index));
    ActivitySequence seq;
    {
        std::ostringstream name;
        name << "u";
        name.width(4);
        name.fill('0');
        name << user_index;
        seq.user_id = name.str();
    }
    seq.start_ts = spec.start_ts;
    seq.horizon_T = horizon_T;

    std::vector<double> last(M, -1.0e18);
    std::vector<double> lam(M, 0.0);
    double t = 0.0;
    while (true) {
        t += rng.exponential(bound);
        if (t >= horizon_T) {
            break;
        }
        const CalendarFeatures cal = calendar_features(spec.start_ts, t);
        const double wd = spec.weekday_mult[static_cast<std::size_t>(cal.weekday)];
        double total = 0.0;
        for (std::size_t k = 0; k < M; ++k) {
            const double gap = t - last[k];
            const double suppress = 1.0 - std::exp(-gap / spec.refractory_rho[k]);
            lam[k] = spec.hourly_rate[k][static_cast<std::size_t>(cal.hour)] * wd * suppress;
            total += lam[k];
        }
        if (rng.uniform01() * bound < total) {
            const double u = rng.uniform01() * total;
            double c = 0.0;
            std::size_t k = M - 1;
            for (std::size_t j = 0; j < M; ++j) {
                c += lam[j];
                if (u < c) {
                    k = j;
                    break;
                }
            }
            seq.events.push_back(Event{t, static_cast<int>(k)});
            last[k] = t;
        }
    }
    return seq;
}

}  // namespace

ActivitySequence generate_sequence(const GroundTruthSpec& spec, int user_index,
                                   std::uint64_t seed) {
    return generate_one(spec, user_index, spec.horizon_T, seed);
}

Corpus generate_corpus(const GroundTruthSpec& spec, int n_users, double horizon_T,
                       std::uint64_t seed) {
    if (n_users < 1) {
        throw ValidationError("generate_corpus requires n_users >= 1");
    }
    Corpus corpus;
    corpus.reserve(static_cast<std::size_t>(n_users));
    for (int u = 0; u < n_users; ++u) {
        corpus.push_back(generate_one(spec, u, horizon_T, seed));
    }
    return corpus;
}

}  // namespace sand::bench
