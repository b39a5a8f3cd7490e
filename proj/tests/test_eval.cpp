#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sand/dynamics.hpp"
#include "sand/eval.hpp"
#include "sand/policy.hpp"

using namespace sand;
using namespace sand::eval;

namespace {

constexpr std::int64_t kMonday = 1474243200;  // Monday 00:00 UTC

ActivitySequence make_seq(std::vector<Event> events, double T = 168.0,
                          std::int64_t start_ts = kMonday) {
    ActivitySequence seq;
    seq.user_id = "u";
    seq.start_ts = start_ts;
    seq.horizon_T = T;
    seq.events = std::move(events);
    return seq;
}

ActivityTaxonomy tiny_taxonomy(int M) {
    ActivityTaxonomy tax;
    tax.M = M;
    for (int k = 0; k < M; ++k) {
        tax.names.push_back("type" + std::to_string(k));
        tax.need_level.push_back(1 + k % 3);
    }
    return tax;
}

void check_histogram_invariants(const MetricHistogram& h) {
    REQUIRE(!h.mass.empty());
    REQUIRE(h.labels.size() == h.mass.size());
    double total = 0.0;
    for (double m : h.mass) {
        CHECK(m >= 0.0);
        total += m;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
}

std::string error_text(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

Config tiny_config() {
    Config cfg;
    cfg.internal_dim = 2;
    cfg.memory_dim = 2;
    cfg.activity_embed_dim = 3;
    cfg.feature_embed_dim = 3;
    cfg.hidden = 6;
    cfg.depth = 1;
    cfg.delta = 0.1;
    return cfg;
}

struct Rig {
    net::ParamStore store;
    dyn::DynamicsNets nets;
    policy::IntensityHead head;
};

Rig make_rig(const Config& cfg, const ActivityTaxonomy& tax, std::uint64_t seed) {
    Rig rig;
    RngStream rng(seed, 0);
    rig.nets = dyn::make_dynamics(cfg, tax, rig.store, rng);
    rig.head = policy::make_intensity_head(cfg, tax, rig.store, rng);
    return rig;
}

// All head weights zero and the output bias at softplus_inv(c) pins every
// intensity to the constant c regardless of state.
void freeze_head_constant(Rig& rig, double c) {
    for (const auto& name : rig.store.names_with_prefix("policy.")) {
        for (double& v : rig.store.value(name).data) v = 0.0;
    }
    for (double& v : rig.store.value("policy.head.b1").data) {
        v = std::log(std::expm1(c));
    }
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        fields.push_back(cur);
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace

TEST_CASE("daily activity histogram counts events per elapsed day") {
    // Day boundaries sit at multiples of 24 h from sequence start, not at
    // calendar midnight: an offset start_ts must not move them.
    for (std::int64_t start : {kMonday, kMonday + 6 * 3600}) {
        const Corpus corpus = {make_seq({{1.0, 0}, {5.0, 0}, {23.0, 0}, {25.0, 0}}, 48.0,
                                        start)};
        const MetricHistogram h =
            histogram(corpus, MetricKind::kDailyAct, tiny_taxonomy(3));
        check_histogram_invariants(h);
        CHECK(h.labels[1] == "1");
        CHECK(h.labels[3] == "3");
        CHECK(h.mass[1] == 0.5);  // day 1 held one event
        CHECK(h.mass[3] == 0.5);  // day 0 held three
        for (std::size_t i = 0; i < h.mass.size(); ++i) {
            if (i != 1 && i != 3) CHECK(h.mass[i] == 0.0);
        }
    }
}

TEST_CASE("daily activity histogram clamps busy days into the overflow bin") {
    std::vector<Event> events;
    for (int i = 0; i < 25; ++i) {
        events.push_back({0.5 + 0.1 * i, 0});
    }
    const Corpus corpus = {make_seq(events, 24.0)};
    const MetricHistogram h = histogram(corpus, MetricKind::kDailyAct, tiny_taxonomy(3));
    check_histogram_invariants(h);
    CHECK(h.labels.back() == ">=20");
    CHECK(h.mass.back() == 1.0);
}

TEST_CASE("macro interval histogram places a 3 h gap in bin [2,4)") {
    const Corpus corpus = {make_seq({{1.0, 0}, {4.0, 1}})};
    const MetricHistogram h = histogram(corpus, MetricKind::kMacroInt, tiny_taxonomy(3));
    check_histogram_invariants(h);
    CHECK(h.labels[1] == "[2,4)");
    CHECK(h.mass[1] == 1.0);
}

TEST_CASE("interval binning covers boundaries and the overflow tail") {
    // Gaps: 2.0 lands in [2,4), 47.99 in [46,48), 50 in the overflow.
    const Corpus corpus = {make_seq({{0.0, 0}, {2.0, 0}}, 168.0),
                           make_seq({{0.0, 0}, {47.99, 0}}, 168.0),
                           make_seq({{0.0, 0}, {50.0, 0}}, 168.0),
                           make_seq({{0.0, 0}, {48.0, 0}}, 168.0)};
    const MetricHistogram h = histogram(corpus, MetricKind::kMacroInt, tiny_taxonomy(3));
    check_histogram_invariants(h);
    CHECK(h.mass[1] == 0.25);
    CHECK(h.mass[23] == 0.25);
    CHECK(h.labels.back() == "[48,inf)");
    CHECK(h.mass.back() == 0.5);
}

TEST_CASE("activity type histogram is a point mass under a single type") {
    const Corpus corpus = {make_seq({{1.0, 2}, {2.0, 2}, {3.0, 2}})};
    const MetricHistogram h = histogram(corpus, MetricKind::kActType, tiny_taxonomy(4));
    check_histogram_invariants(h);
    REQUIRE(h.mass.size() == 4);
    CHECK(h.mass[2] == 1.0);
    CHECK(h.labels[2] == "type2");
}

TEST_CASE("hour and weekday histograms follow the calendar") {
    // Monday start: t = 1.5 is Monday hour 1, t = 25.5 is Tuesday hour 1,
    // t = 50.25 is Wednesday hour 2.
    const Corpus corpus = {make_seq({{1.5, 0}, {25.5, 0}, {50.25, 0}})};
    const MetricHistogram hh = histogram(corpus, MetricKind::kHour, tiny_taxonomy(3));
    check_histogram_invariants(hh);
    CHECK(hh.mass[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(hh.mass[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    const MetricHistogram hw = histogram(corpus, MetricKind::kWeekday, tiny_taxonomy(3));
    check_histogram_invariants(hw);
    REQUIRE(hw.mass.size() == 7);
    CHECK(hw.mass[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(hw.mass[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(hw.mass[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("micro intervals are recurrences of one type only") {
    // Type 0 at t = 1, 5; type 1 interleaved at t = 3. The type-0 recurrence
    // is 4 h, unaffected by the interleaved event.
    const Corpus corpus = {make_seq({{1.0, 0}, {3.0, 1}, {5.0, 0}, {30.0, 1}})};
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    const MetricHistogram h0 = histogram(corpus, MetricKind::kMicroInt, tax, 0);
    check_histogram_invariants(h0);
    CHECK(h0.mass[2] == 1.0);  // [4,6)
    const MetricHistogram h1 = histogram(corpus, MetricKind::kMicroInt, tax, 1);
    CHECK(h1.mass[13] == 1.0);  // 27 h lands in [26,28)
    CHECK_THROWS_AS(histogram(corpus, MetricKind::kMicroInt, tax, -1), ContractError);
    CHECK_THROWS_AS(histogram(corpus, MetricKind::kMicroInt, tax, 3), ContractError);
}

TEST_CASE("histograms are invariant to corpus order") {
    RngStream rng(99, 0);
    Corpus corpus;
    for (int u = 0; u < 8; ++u) {
        std::vector<Event> events;
        double t = 0.0;
        for (int i = 0; i < 30; ++i) {
            t += rng.exponential(0.5);
            if (t >= 168.0) break;
            events.push_back({t, static_cast<int>(rng.below(3))});
        }
        corpus.push_back(make_seq(std::move(events)));
    }
    Corpus reversed(corpus.rbegin(), corpus.rend());
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    for (MetricKind kind : {MetricKind::kMacroInt, MetricKind::kDailyAct,
                            MetricKind::kActType, MetricKind::kWeekday,
                            MetricKind::kHour}) {
        CHECK(histogram(corpus, kind, tax).mass == histogram(reversed, kind, tax).mass);
    }
    CHECK(histogram(corpus, MetricKind::kMicroInt, tax, 1).mass ==
          histogram(reversed, MetricKind::kMicroInt, tax, 1).mass);
}

TEST_CASE("empty metrics raise errors that name the metric") {
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    const Corpus no_events = {make_seq({})};
    const Corpus empty;

    CHECK(error_text([&] { histogram(no_events, MetricKind::kActType, tax); })
              .find("act_type") != std::string::npos);
    CHECK(error_text([&] { histogram(no_events, MetricKind::kHour, tax); })
              .find("hour") != std::string::npos);
    CHECK(error_text([&] { histogram(no_events, MetricKind::kWeekday, tax); })
              .find("weekday") != std::string::npos);
    // A single event yields no interval.
    const Corpus one = {make_seq({{1.0, 0}})};
    CHECK(error_text([&] { histogram(one, MetricKind::kMacroInt, tax); })
              .find("macro_int") != std::string::npos);
    const std::string micro =
        error_text([&] { histogram(one, MetricKind::kMicroInt, tax, 1); });
    CHECK(micro.find("micro_int") != std::string::npos);
    CHECK(micro.find("type1") != std::string::npos);
    CHECK_THROWS_AS(histogram(empty, MetricKind::kDailyAct, tax), ValidationError);
    CHECK_THROWS_AS(histogram(no_events, MetricKind::kActType, tax), ValidationError);

    // Days with zero events still count as observations for DailyAct.
    const MetricHistogram h = histogram(no_events, MetricKind::kDailyAct, tax);
    CHECK(h.mass[0] == 1.0);
}

TEST_CASE("jsd matches hand-derived oracles") {
    const std::vector<double> half = {0.5, 0.5};
    CHECK(jsd(half, half) == 0.0);
    CHECK(jsd({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
    // H(M) with M = (0.75, 0.25) is 2 - 0.75 log2 3; subtracting
    // (H(P) + H(Q)) / 2 = 1/2 leaves 1.5 - 0.75 log2 3.
    const double oracle = 1.5 - 0.75 * std::log2(3.0);
    CHECK(jsd(half, {1.0, 0.0}) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(jsd(half, {1.0, 0.0}) == doctest::Approx(0.311278).epsilon(1e-5));
}

TEST_CASE("jsd is symmetric and bounded over random mass pairs") {
    RngStream rng(4242, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t dim = 2 + rng.below(29);
        std::vector<double> p(dim);
        std::vector<double> q(dim);
        double sp = 0.0;
        double sq = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            p[i] = rng.uniform01();
            q[i] = rng.uniform01();
            if (rng.below(4) == 0) p[i] = 0.0;
            if (rng.below(4) == 0) q[i] = 0.0;
            sp += p[i];
            sq += q[i];
        }
        if (sp == 0.0 || sq == 0.0) continue;
        for (std::size_t i = 0; i < dim; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        const double a = jsd(p, q);
        const double b = jsd(q, p);
        CHECK(std::abs(a - b) < 1e-12);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
}

TEST_CASE("jsd rejects malformed inputs") {
    CHECK_THROWS_AS(jsd({0.5, 0.5}, {1.0}), ContractError);
    CHECK_THROWS_AS(jsd({}, {}), ContractError);
    CHECK_THROWS_AS(jsd({0.6, 0.6}, {0.5, 0.5}), ContractError);
    CHECK_THROWS_AS(jsd({1.5, -0.5}, {0.5, 0.5}), ContractError);
}

TEST_CASE("identical corpora evaluate to zero on all six metrics") {
    RngStream rng(7, 0);
    Corpus corpus;
    for (int u = 0; u < 6; ++u) {
        std::vector<Event> events;
        double t = 0.0;
        while (true) {
            t += rng.exponential(0.4);
            if (t >= 168.0) break;
            events.push_back({t, static_cast<int>(rng.below(3))});
        }
        corpus.push_back(make_seq(std::move(events)));
    }
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    const EvalReport rep = evaluate(corpus, corpus, tax);
    CHECK(rep.macro_int == 0.0);
    CHECK(rep.micro_int == 0.0);
    CHECK(rep.daily_act == 0.0);
    CHECK(rep.act_type == 0.0);
    CHECK(rep.weekday == 0.0);
    CHECK(rep.hour == 0.0);
    CHECK(rep.mean() == 0.0);
    CHECK(rep.gen_sequences == 6);
    CHECK(rep.real_sequences == 6);
    CHECK(rep.warnings.empty());
}

TEST_CASE("near-disjoint hour distributions score close to 1") {
    // Generated mass sits entirely in hour 0; the real corpus is uniform
    // over hours 1..23 with a single stray hour-0 event.
    std::vector<Event> gen_events;
    for (int i = 0; i < 40; ++i) gen_events.push_back({0.01 + 0.02 * i, 0});
    const Corpus gen = {make_seq(gen_events)};

    std::vector<Event> real_events = {{0.25, 0}};
    for (int h = 1; h < 24; ++h) {
        for (int r = 0; r < 10; ++r) {
            real_events.push_back({h + 0.05 + 0.08 * r, 0});
        }
    }
    const Corpus real = {make_seq(real_events)};

    const ActivityTaxonomy tax = tiny_taxonomy(3);
    const double near = jsd(histogram(gen, MetricKind::kHour, tax).mass,
                            histogram(real, MetricKind::kHour, tax).mass);
    CHECK(near >= 0.9);
    CHECK(near < 1.0);

    // Fully disjoint supports reach the base-2 upper bound exactly.
    const Corpus disjoint = {make_seq(std::vector<Event>(real_events.begin() + 1,
                                                         real_events.end()))};
    const double full = jsd(histogram(gen, MetricKind::kHour, tax).mass,
                            histogram(disjoint, MetricKind::kHour, tax).mass);
    CHECK(full == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("micro equals macro on a single-type corpus") {
    RngStream rng(13, 0);
    Corpus corpus;
    for (int u = 0; u < 5; ++u) {
        std::vector<Event> events;
        double t = 0.0;
        while (true) {
            t += rng.exponential(0.3);
            if (t >= 168.0) break;
            events.push_back({t, 0});
        }
        corpus.push_back(make_seq(std::move(events)));
    }
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    CHECK(histogram(corpus, MetricKind::kMacroInt, tax).mass ==
          histogram(corpus, MetricKind::kMicroInt, tax, 0).mass);
    const EvalReport rep = evaluate(corpus, corpus, tax);
    CHECK(rep.micro_int == rep.macro_int);
}

TEST_CASE("types missing from the generated corpus contribute JSD 1 with a warning") {
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    // Real recurrences exist for all three types.
    const Corpus real = {make_seq({{1.0, 0}, {2.0, 0}, {3.0, 1}, {4.0, 1}, {5.0, 2},
                                   {6.0, 2}})};
    // Generated recurrences only for types 0 and 1, and they match real.
    const Corpus gen = {make_seq({{1.0, 0}, {2.0, 0}, {3.0, 1}, {4.0, 1}})};
    const EvalReport rep = evaluate(gen, real, tax);
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].find("type2") != std::string::npos);
    // Types 0 and 1 agree exactly, type 2 contributes 1.0.
    CHECK(rep.micro_int == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("evaluate fails when the real corpus has no recurrences at all") {
    const ActivityTaxonomy tax = tiny_taxonomy(3);
    const Corpus real = {make_seq({{1.0, 0}, {2.0, 1}}), make_seq({{1.0, 1}, {2.0, 2}})};
    CHECK(error_text([&] { evaluate(real, real, tax); }).find("micro_int") !=
          std::string::npos);
}

TEST_CASE("eval report round-trips through JSON exactly") {
    EvalReport rep;
    rep.macro_int = 0.1234567890123456;
    rep.micro_int = 1.0 / 3.0;
    rep.daily_act = 0.0;
    rep.act_type = 1e-17;
    rep.weekday = 0.9999999999999999;
    rep.hour = 2.0 / 7.0;
    rep.warnings = {"w1", "w2"};
    rep.gen_sequences = 500;
    rep.real_sequences = 499;
    rep.config_hash = "cafe0123";
    const EvalReport back = parse_eval_report(rep.to_json());
    CHECK(back.macro_int == rep.macro_int);
    CHECK(back.micro_int == rep.micro_int);
    CHECK(back.daily_act == rep.daily_act);
    CHECK(back.act_type == rep.act_type);
    CHECK(back.weekday == rep.weekday);
    CHECK(back.hour == rep.hour);
    CHECK(back.warnings == rep.warnings);
    CHECK(back.gen_sequences == rep.gen_sequences);
    CHECK(back.real_sequences == rep.real_sequences);
    CHECK(back.config_hash == rep.config_hash);
    CHECK(back.mean() == rep.mean());

    CHECK_THROWS_AS(parse_eval_report("{oops"), ValidationError);
    CHECK_THROWS_AS(parse_eval_report("{\"mystery\": 1}"), ValidationError);
    CHECK_THROWS_AS(parse_eval_report("{\"hour\": \"high\"}"), ValidationError);
}

TEST_CASE("report mean averages the six metrics") {
    EvalReport rep;
    rep.macro_int = 0.06;
    rep.micro_int = 0.12;
    rep.daily_act = 0.18;
    rep.act_type = 0.0;
    rep.weekday = 0.24;
    rep.hour = 0.0;
    CHECK(rep.mean() == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("intensity trace has one row per grid node plus one per event") {
    const Config cfg = tiny_config();
    const ActivityTaxonomy tax = tiny_taxonomy(9);
    Rig rig = make_rig(cfg, tax, 21);
    const ActivitySequence seq = make_seq({{0.55, 2}, {1.25, 7}}, 2.0);
    const std::string path = "trace_rows.csv";
    export_intensity_trace(rig.nets, rig.head, tax, seq, 0.1, path);
    const auto rows = read_csv(path);
    REQUIRE(!rows.empty());
    CHECK(rows[0] == std::vector<std::string>{"t", "lambda_l1", "lambda_l2", "lambda_l3",
                                              "event_k"});
    // floor(2.0 / 0.1) + 1 grid rows plus 2 event rows.
    CHECK(rows.size() == 1 + 21 + 2);
    int marked = 0;
    std::vector<std::string> marks;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        REQUIRE(rows[i].size() == 5);
        if (!rows[i][4].empty()) {
            ++marked;
            marks.push_back(rows[i][4]);
        }
    }
    CHECK(marked == 2);
    CHECK(marks == std::vector<std::string>{"2", "7"});
    std::remove(path.c_str());

    CHECK_THROWS_AS(
        export_intensity_trace(rig.nets, rig.head, tax, seq, 0.0, "x.csv"),
        ContractError);
}

TEST_CASE("frozen equal intensities make the three level columns identical") {
    const Config cfg = tiny_config();
    const ActivityTaxonomy tax = tiny_taxonomy(9);  // three types per level
    Rig rig = make_rig(cfg, tax, 22);
    freeze_head_constant(rig, 0.5);
    const ActivitySequence seq = make_seq({{0.35, 1}, {0.85, 4}}, 1.5);
    const std::string path = "trace_equal.csv";
    export_intensity_trace(rig.nets, rig.head, tax, seq, 0.1, path);
    const auto rows = read_csv(path);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][1] == rows[i][2]);
        CHECK(rows[i][2] == rows[i][3]);
    }
    std::remove(path.c_str());
}

TEST_CASE("event rows in the trace reflect the post-jump state") {
    const Config cfg = tiny_config();
    const ActivityTaxonomy tax = tiny_taxonomy(9);
    Rig rig = make_rig(cfg, tax, 23);
    // A fresh model is deliberately inert (zero jump response, fixed z0);
    // scatter the dynamics weights to mimic a trained one.
    RngStream noise(24, 0);
    for (const auto& name : rig.store.names_with_prefix("dyn.")) {
        for (double& v : rig.store.value(name).data) v = noise.uniform(-0.3, 0.3);
    }
    const ActivitySequence seq = make_seq({{0.55, 3}}, 1.0);
    const std::string path = "trace_jump.csv";
    export_intensity_trace(rig.nets, rig.head, tax, seq, 0.1, path);
    const auto rows = read_csv(path);
    std::size_t event_row = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (!rows[i][4].empty()) event_row = i;
    }
    REQUIRE(event_row > 1);
    // Compare against the preceding grid row: the jump moved the state.
    bool any_diff = false;
    for (int c = 1; c <= 3; ++c) {
        if (rows[event_row][static_cast<std::size_t>(c)] !=
            rows[event_row - 1][static_cast<std::size_t>(c)]) {
            any_diff = true;
        }
    }
    CHECK(any_diff);
    std::remove(path.c_str());
}
