#include "sand/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sand {

namespace {

using nlohmann::json;

constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
    z += kSplitMixGamma;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : state_(mix64(mix64(seed) ^ mix64(stream_id ^ 0xDA3E39CB94B95BDBull))) {}

std::uint64_t RngStream::next_u64() {
    state_ += kSplitMixGamma;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double RngStream::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
}

double RngStream::exponential(double rate) {
    if (!(rate > 0.0)) {
        throw ContractError("exponential draw requires rate > 0");
    }
    return -std::log1p(-uniform01()) / rate;
}

std::uint64_t RngStream::below(std::uint64_t n) {
    if (n == 0) {
        throw ContractError("below(0) is undefined");
    }
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return x % n;
}

void ActivityTaxonomy::validate() const {
    if (M <= 0) {
        throw ValidationError("taxonomy must have M > 0 activity types");
    }
    if (static_cast<int>(names.size()) != M || static_cast<int>(need_level.size()) != M) {
        throw ValidationError("taxonomy names/need_level must both have M entries");
    }
    bool seen[4] = {false, false, false, false};
    for (int lvl : need_level) {
        if (lvl < 1 || lvl > 3) {
            throw ValidationError("taxonomy need_level entries must be in {1,2,3}");
        }
        seen[lvl] = true;
    }
    if (!(seen[1] && seen[2] && seen[3])) {
        throw ValidationError("taxonomy must populate all three need levels");
    }
}

int need_level_of(const ActivityTaxonomy& tax, int k) {
    if (k < 0 || k >= tax.M) {
        throw ContractError("activity type " + std::to_string(k) +
                            " out of range [0," + std::to_string(tax.M) + ")");
    }
    return tax.need_level[static_cast<std::size_t>(k)];
}

CalendarFeatures calendar_features(std::int64_t start_ts, double t_hours) {
    if (start_ts < 0) {
        throw ContractError("start_ts must be non-negative");
    }
    const std::int64_t abs_s = start_ts + std::llround(t_hours * 3600.0);
    const std::int64_t day_s = ((abs_s % 86400) + 86400) % 86400;
    const std::int64_t days = (abs_s - day_s) / 86400;
    CalendarFeatures f;
    f.hour = static_cast<int>(day_s / 3600);
    // Epoch day 0 (1970-01-01) was a Thursday; weekday 0 is Monday.
    f.weekday = static_cast<int>(((days % 7) + 7 + 3) % 7);
    return f;
}

std::vector<Violation> validate_sequence(const ActivitySequence& seq,
                                         const ActivityTaxonomy& tax) {
    std::vector<Violation> out;
    if (!(seq.horizon_T > 0.0)) {
        out.push_back({"horizon_T must be positive (user " + seq.user_id + ")"});
    }
    double prev = -1.0;
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
        const Event& e = seq.events[i];
        if (!(e.t >= 0.0) || !std::isfinite(e.t)) {
            out.push_back({"event " + std::to_string(i) + " has invalid time (user " +
                           seq.user_id + ")"});
            continue;
        }
        if (i > 0 && !(e.t > prev)) {
            out.push_back({"events not strictly increasing at index " + std::to_string(i) +
                           " (user " + seq.user_id + ")"});
        }
        if (e.t >= seq.horizon_T) {
            out.push_back({"event at/after horizon at index " + std::to_string(i) +
                           " (user " + seq.user_id + ")"});
        }
        if (e.k < 0 || e.k >= tax.M) {
            out.push_back({"type out of range at index " + std::to_string(i) + " (user " +
                           seq.user_id + ")"});
        }
        prev = e.t;
    }
    return out;
}

namespace {

ActivitySequence sequence_from_json(const json& j, std::size_t line_no) {
    const std::string where = "line " + std::to_string(line_no);
    if (!j.is_object()) {
        throw ValidationError(where + ": expected a JSON object");
    }
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        if (key != "user_id" && key != "start_ts" && key != "horizon_T" && key != "events") {
            throw ValidationError(where + ": unknown key \"" + key + "\"");
        }
    }
    if (!j.contains("user_id") || !j.contains("start_ts") || !j.contains("horizon_T") ||
        !j.contains("events")) {
        throw ValidationError(where + ": missing required key");
    }
    ActivitySequence seq;
    if (!j["user_id"].is_string()) {
        throw ValidationError(where + ": user_id must be a string");
    }
    seq.user_id = j["user_id"].get<std::string>();
    if (!j["start_ts"].is_number_integer()) {
        throw ValidationError(where + ": start_ts must be an integer");
    }
    seq.start_ts = j["start_ts"].get<std::int64_t>();
    if (!j["horizon_T"].is_number()) {
        throw ValidationError(where + ": horizon_T must be a number");
    }
    seq.horizon_T = j["horizon_T"].get<double>();
    if (!j["events"].is_array()) {
        throw ValidationError(where + ": events must be an array");
    }
    for (const auto& je : j["events"]) {
        if (!je.is_object()) {
            throw ValidationError(where + ": event entries must be objects");
        }
        for (const auto& item : je.items()) {
            if (item.key() != "t" && item.key() != "k") {
                throw ValidationError(where + ": unknown event key \"" + item.key() + "\"");
            }
        }
        if (!je.contains("t") || !je.contains("k") || !je["t"].is_number() ||
            !je["k"].is_number_integer()) {
            throw ValidationError(where + ": events need numeric t and integer k");
        }
        seq.events.push_back(Event{je["t"].get<double>(), je["k"].get<int>()});
    }
    return seq;
}

}  // namespace

Corpus parse_dataset_text(const std::string& text, const ActivityTaxonomy& tax) {
    Corpus corpus;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("line " + std::to_string(line_no) +
                                  ": malformed JSON: " + e.what());
        }
        ActivitySequence seq = sequence_from_json(j, line_no);
        const auto violations = validate_sequence(seq, tax);
        if (!violations.empty()) {
            throw ValidationError("line " + std::to_string(line_no) + ": " +
                                  violations.front().message);
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

Corpus parse_dataset(const std::string& path, const ActivityTaxonomy& tax) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open dataset file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_dataset_text(buf.str(), tax);
}

std::string serialize_dataset(const Corpus& corpus) {
    std::string out;
    for (const auto& seq : corpus) {
        json j;
        j["user_id"] = seq.user_id;
        j["start_ts"] = seq.start_ts;
        j["horizon_T"] = seq.horizon_T;
        json events = json::array();
        for (const Event& e : seq.events) {
            events.push_back(json{{"t", e.t}, {"k", e.k}});
        }
        j["events"] = std::move(events);
        out += j.dump();
        out += '\n';
    }
    return out;
}

void write_dataset(const Corpus& corpus, const std::string& path) {
    atomic_write(path, serialize_dataset(corpus));
}

ActivityTaxonomy load_taxonomy(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open taxonomy file: " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("taxonomy parse error: " + std::string(e.what()));
    }
    ActivityTaxonomy tax;
    tax.M = j.at("M").get<int>();
    tax.names = j.at("names").get<std::vector<std::string>>();
    tax.need_level = j.at("need_level").get<std::vector<int>>();
    tax.validate();
    return tax;
}

ActivityTaxonomy default_taxonomy() {
    ActivityTaxonomy tax;
    tax.names = {"eat",     "home-rest", "daily-shopping", "work",  "school",
                 "commute", "medical",   "sports",         "social-entertainment"};
    tax.need_level = {1, 1, 1, 2, 2, 2, 2, 3, 3};
    tax.M = static_cast<int>(tax.names.size());
    return tax;
}

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ContractError("cannot open for write: " + tmp);
        }
        out << content;
        if (!out) {
            throw ContractError("write failed: " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw ContractError("rename failed: " + tmp + " -> " + path);
    }
}

void Config::validate() const {
    if (internal_dim < 1 || memory_dim < 1) {
        throw ContractError("state dims must be >= 1");
    }
    if (!(delta > 0.0)) {
        throw ContractError("delta must be > 0");
    }
    if (!(lambda_max > 0.0) || !(lambda_min > 0.0) || lambda_min >= lambda_max) {
        throw ContractError("intensity clamp requires 0 < lambda_min < lambda_max");
    }
    if (depth < 1 || hidden < 1) {
        throw ContractError("network depth/hidden must be >= 1");
    }
    if (activity_embed_dim < 1 || feature_embed_dim < 1) {
        throw ContractError("embedding dims must be >= 1");
    }
    if (batch_size < 1) {
        throw ContractError("batch_size must be >= 1");
    }
    if (!(lr_pretrain > 0.0) || !(lr_policy > 0.0) || !(lr_disc > 0.0)) {
        throw ContractError("learning rates must be > 0");
    }
}

namespace {

json config_to_json(const Config& c) {
    json j;
    j["internal_dim"] = c.internal_dim;
    j["memory_dim"] = c.memory_dim;
    j["activity_embed_dim"] = c.activity_embed_dim;
    j["feature_embed_dim"] = c.feature_embed_dim;
    j["hidden"] = c.hidden;
    j["depth"] = c.depth;
    j["delta"] = c.delta;
    j["horizon_T"] = c.horizon_T;
    j["start_ts"] = c.start_ts;
    j["lambda_min"] = c.lambda_min;
    j["lambda_max"] = c.lambda_max;
    j["max_events"] = c.max_events;
    j["lookahead_hours"] = c.lookahead_hours;
    j["bound_multiplier"] = c.bound_multiplier;
    j["history_window"] = c.history_window;
    j["lr_pretrain"] = c.lr_pretrain;
    j["lr_policy"] = c.lr_policy;
    j["lr_disc"] = c.lr_disc;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_eps"] = c.adam_eps;
    j["batch_size"] = c.batch_size;
    j["pretrain_epochs"] = c.pretrain_epochs;
    j["gail_iterations"] = c.gail_iterations;
    j["grad_clip"] = c.grad_clip;
    j["label_smoothing"] = c.label_smoothing;
    j["disable_need_hierarchy"] = c.disable_need_hierarchy;
    j["disable_gail"] = c.disable_gail;
    j["disable_pretrain"] = c.disable_pretrain;
    j["scalar_decay"] = c.scalar_decay;
    j["seed"] = c.seed;
    return j;
}

void config_apply(Config& c, const json& j) {
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        if (key == "internal_dim") c.internal_dim = v.get<int>();
        else if (key == "memory_dim") c.memory_dim = v.get<int>();
        else if (key == "activity_embed_dim") c.activity_embed_dim = v.get<int>();
        else if (key == "feature_embed_dim") c.feature_embed_dim = v.get<int>();
        else if (key == "hidden") c.hidden = v.get<int>();
        else if (key == "depth") c.depth = v.get<int>();
        else if (key == "delta") c.delta = v.get<double>();
        else if (key == "horizon_T") c.horizon_T = v.get<double>();
        else if (key == "start_ts") c.start_ts = v.get<std::int64_t>();
        else if (key == "lambda_min") c.lambda_min = v.get<double>();
        else if (key == "lambda_max") c.lambda_max = v.get<double>();
        else if (key == "max_events") c.max_events = v.get<int>();
        else if (key == "lookahead_hours") c.lookahead_hours = v.get<double>();
        else if (key == "bound_multiplier") c.bound_multiplier = v.get<double>();
        else if (key == "history_window") c.history_window = v.get<int>();
        else if (key == "lr_pretrain") c.lr_pretrain = v.get<double>();
        else if (key == "lr_policy") c.lr_policy = v.get<double>();
        else if (key == "lr_disc") c.lr_disc = v.get<double>();
        else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
        else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
        else if (key == "adam_eps") c.adam_eps = v.get<double>();
        else if (key == "batch_size") c.batch_size = v.get<int>();
        else if (key == "pretrain_epochs") c.pretrain_epochs = v.get<int>();
        else if (key == "gail_iterations") c.gail_iterations = v.get<int>();
        else if (key == "grad_clip") c.grad_clip = v.get<double>();
        else if (key == "label_smoothing") c.label_smoothing = v.get<double>();
        else if (key == "disable_need_hierarchy") c.disable_need_hierarchy = v.get<bool>();
        else if (key == "disable_gail") c.disable_gail = v.get<bool>();
        else if (key == "disable_pretrain") c.disable_pretrain = v.get<bool>();
        else if (key == "scalar_decay") c.scalar_decay = v.get<bool>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ValidationError("unknown config key \"" + key + "\"");
    }
}

}  // namespace

Config Config::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ContractError("cannot open config file: " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ContractError("config parse error: " + std::string(e.what()));
    }
    Config c;
    config_apply(c, j);
    c.validate();
    return c;
}

std::string Config::to_json() const {
    return config_to_json(*this).dump(2);
}

void Config::set_key(const std::string& key, const std::string& value) {
    json v;
    try {
        v = json::parse(value);
    } catch (const json::exception&) {
        v = value;  // bare strings allowed
    }
    config_apply(*this, json{{key, v}});
}

std::string Config::hash() const {
    const std::string dump = config_to_json(*this).dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace sand
