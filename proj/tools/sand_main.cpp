#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sand/benchdata.hpp"
#include "sand/eval.hpp"
#include "sand/selfcheck.hpp"
#include "sand/training.hpp"

namespace {

using nlohmann::json;
using namespace sand;

constexpr std::uint64_t kGenerateStreamBase = 8ull << 32;
constexpr double kGradTolerance = 1e-4;

std::string now_iso() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (pipe == nullptr) {
        return "";
    }
    char buf[256];
    std::string out;
    while (std::fgets(buf, sizeof(buf), pipe) != nullptr) {
        out += buf;
    }
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) {
        out.pop_back();
    }
    return out;
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &pos);
    } catch (const std::exception&) {
        throw ValidationError(what + " must be an unsigned integer, got \"" + text + "\"");
    }
    if (pos != text.size()) {
        throw ValidationError(what + " must be an unsigned integer, got \"" + text + "\"");
    }
    return v;
}

// Options shared by every subcommand.
struct Common {
    std::string config_path;
    std::string taxonomy_path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sc, Common& c) {
    sc->add_option("--config", c.config_path, "config JSON file (flat key space)");
    sc->add_option("--taxonomy", c.taxonomy_path, "taxonomy JSON file (default built in)");
    sc->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
    c.seed_opt = sc->add_option("--seed", c.seed,
                                "seed override (wins over --set and SAND_SEED)");
}

// Precedence: defaults < config file < SAND_SEED < --set < --seed.
Config resolve_config(const Common& c) {
    Config cfg;
    if (!c.config_path.empty()) {
        cfg = Config::from_json_file(c.config_path);
    }
    if (const char* env = std::getenv("SAND_SEED")) {
        cfg.seed = parse_u64(env, "SAND_SEED");
    }
    for (const std::string& kv : c.sets) {
        const std::size_t pos = kv.find('=');
        if (pos == std::string::npos) {
            throw ValidationError("--set expects key=value, got \"" + kv + "\"");
        }
        cfg.set_key(kv.substr(0, pos), kv.substr(pos + 1));
    }
    if (c.seed_opt != nullptr && c.seed_opt->count() > 0) {
        cfg.seed = c.seed;
    }
    cfg.validate();
    return cfg;
}

ActivityTaxonomy resolve_taxonomy(const Common& c) {
    if (c.taxonomy_path.empty()) {
        return default_taxonomy();
    }
    return load_taxonomy(c.taxonomy_path);
}

struct RunContext {
    std::string command;
    Config cfg;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string started = now_iso();
};

void write_manifests(const RunContext& rc) {
    json j;
    j["command"] = rc.command;
    j["config"] = json::parse(rc.cfg.to_json());
    j["inputs"] = rc.inputs;
    j["outputs"] = rc.outputs;
    j["seed"] = rc.cfg.seed;
    j["started"] = rc.started;
    j["finished"] = now_iso();
    j["git_describe"] = git_describe();
    for (const std::string& out : rc.outputs) {
        atomic_write(out + ".manifest.json", j.dump(2) + "\n");
    }
}

void progress_to_stderr(const std::string& line) { std::cerr << line << "\n"; }

Corpus load_corpus(const std::string& path, const ActivityTaxonomy& tax) {
    Corpus corpus = parse_dataset(path, tax);
    if (corpus.empty()) {
        throw ValidationError("corpus \"" + path + "\" contains no sequences");
    }
    return corpus;
}

std::string padded_id(const std::string& prefix, int i) {
    std::ostringstream os;
    os << prefix << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

int finish_training(train::Model& model, const train::TrainReport& report,
                    const std::string& out, const std::string& report_path,
                    RunContext& rc) {
    model.save(out);
    atomic_write(report_path, report.to_json() + "\n");
    rc.outputs = {out, report_path};
    write_manifests(rc);
    if (!report.aborted_reason.empty()) {
        std::cerr << "training aborted: " << report.aborted_reason << "\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-sequence simulator: need dynamics, adversarial training, "
                 "baselines, and distribution evaluation"};
    app.require_subcommand(1);
    int rc = 0;

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "sample a ground-truth corpus");
    Common synth_c;
    std::string synth_spec, synth_out;
    int synth_n = 0;
    double synth_T = 0.0;
    synth->add_option("--spec", synth_spec, "ground-truth spec JSON")->required();
    synth->add_option("--out", synth_out, "output corpus JSONL")->required();
    synth->add_option("--n", synth_n, "number of users (default: spec value)");
    synth->add_option("--horizon", synth_T, "horizon in hours (default: spec value)");
    add_common(synth, synth_c);
    synth->callback([&] {
        RunContext ctx;
        ctx.command = "synth-data";
        ctx.cfg = resolve_config(synth_c);
        const ActivityTaxonomy tax = resolve_taxonomy(synth_c);
        const bench::GroundTruthSpec spec = bench::load_ground_truth(synth_spec, tax);
        const int n = synth_n > 0 ? synth_n : spec.n_users;
        const double T = synth_T > 0.0 ? synth_T : spec.horizon_T;
        const Corpus corpus = bench::generate_corpus(spec, n, T, ctx.cfg.seed);
        write_dataset(corpus, synth_out);
        ctx.inputs = {synth_spec};
        if (!synth_c.taxonomy_path.empty()) ctx.inputs.push_back(synth_c.taxonomy_path);
        ctx.outputs = {synth_out};
        write_manifests(ctx);
    });

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "likelihood pretraining of the generator");
    Common pre_c;
    std::string pre_data, pre_out, pre_report;
    pre->add_option("--data", pre_data, "training corpus JSONL")->required();
    pre->add_option("--out", pre_out, "output checkpoint JSON")->required();
    pre->add_option("--report", pre_report, "training report path (default <out>.report.json)");
    add_common(pre, pre_c);
    pre->callback([&] {
        RunContext ctx;
        ctx.command = "pretrain";
        ctx.cfg = resolve_config(pre_c);
        const ActivityTaxonomy tax = resolve_taxonomy(pre_c);
        const Corpus corpus = load_corpus(pre_data, tax);
        train::Model model(ctx.cfg, tax);
        train::TrainReport report;
        train::pretrain_mle(model, corpus, report, progress_to_stderr);
        ctx.inputs = {pre_data};
        if (!pre_c.config_path.empty()) ctx.inputs.push_back(pre_c.config_path);
        if (!pre_c.taxonomy_path.empty()) ctx.inputs.push_back(pre_c.taxonomy_path);
        const std::string report_path =
            pre_report.empty() ? pre_out + ".report.json" : pre_report;
        rc = finish_training(model, report, pre_out, report_path, ctx);
    });

    // train
    auto* tr = app.add_subcommand("train", "adversarial training (pretrains first "
                                           "unless --init or disable_pretrain)");
    Common tr_c;
    std::string tr_data, tr_out, tr_init, tr_report;
    tr->add_option("--data", tr_data, "training corpus JSONL")->required();
    tr->add_option("--out", tr_out, "output checkpoint JSON")->required();
    tr->add_option("--init", tr_init, "initial checkpoint (skips the pretraining phase)");
    tr->add_option("--report", tr_report, "training report path (default <out>.report.json)");
    add_common(tr, tr_c);
    tr->callback([&] {
        RunContext ctx;
        ctx.command = "train";
        ctx.cfg = resolve_config(tr_c);
        const ActivityTaxonomy tax = resolve_taxonomy(tr_c);
        const Corpus corpus = load_corpus(tr_data, tax);
        std::unique_ptr<train::Model> model;
        train::TrainReport report;
        if (!tr_init.empty()) {
            model = train::Model::load(ctx.cfg, tax, tr_init);
        } else {
            model = std::make_unique<train::Model>(ctx.cfg, tax);
            if (!ctx.cfg.disable_pretrain) {
                train::pretrain_mle(*model, corpus, report, progress_to_stderr);
            }
        }
        if (report.aborted_reason.empty()) {
            train::train_gail(*model, corpus, report, progress_to_stderr);
        }
        ctx.inputs = {tr_data};
        if (!tr_init.empty()) ctx.inputs.push_back(tr_init);
        if (!tr_c.config_path.empty()) ctx.inputs.push_back(tr_c.config_path);
        if (!tr_c.taxonomy_path.empty()) ctx.inputs.push_back(tr_c.taxonomy_path);
        const std::string report_path =
            tr_report.empty() ? tr_out + ".report.json" : tr_report;
        rc = finish_training(*model, report, tr_out, report_path, ctx);
    });

    // generate
    auto* gen = app.add_subcommand("generate", "roll out sequences from a checkpoint");
    Common gen_c;
    std::string gen_ckpt, gen_out;
    int gen_n = 100;
    int gen_jobs = 1;
    gen->add_option("--ckpt", gen_ckpt, "model checkpoint JSON")->required();
    gen->add_option("--out", gen_out, "output corpus JSONL")->required();
    gen->add_option("--n", gen_n, "number of sequences (default 100)");
    gen->add_option("--jobs", gen_jobs, "worker threads; any value is bit-reproducible");
    add_common(gen, gen_c);
    gen->callback([&] {
        RunContext ctx;
        ctx.command = "generate";
        ctx.cfg = resolve_config(gen_c);
        const ActivityTaxonomy tax = resolve_taxonomy(gen_c);
        if (gen_n <= 0) {
            throw ValidationError("--n must be positive");
        }
        if (gen_jobs <= 0) {
            throw ValidationError("--jobs must be positive");
        }
        const auto model = train::Model::load(ctx.cfg, tax, gen_ckpt);
        Corpus corpus(static_cast<std::size_t>(gen_n));
        // One counter stream per sequence index: the partition across
        // workers cannot change the bytes.
        auto worker = [&](int w) {
            for (int i = w; i < gen_n; i += gen_jobs) {
                RngStream rng(ctx.cfg.seed,
                              kGenerateStreamBase + static_cast<std::uint64_t>(i));
                corpus[static_cast<std::size_t>(i)] =
                    policy::rollout(model->nets, model->head, ctx.cfg.start_ts,
                                    ctx.cfg.horizon_T, ctx.cfg.max_events, rng,
                                    padded_id("gen", i))
                        .seq;
            }
        };
        if (gen_jobs == 1) {
            worker(0);
        } else {
            std::vector<std::thread> threads;
            for (int w = 0; w < gen_jobs; ++w) {
                threads.emplace_back(worker, w);
            }
            for (std::thread& t : threads) {
                t.join();
            }
        }
        write_dataset(corpus, gen_out);
        ctx.inputs = {gen_ckpt};
        if (!gen_c.taxonomy_path.empty()) ctx.inputs.push_back(gen_c.taxonomy_path);
        ctx.outputs = {gen_out};
        write_manifests(ctx);
    });

    // eval
    auto* ev = app.add_subcommand("eval", "six-metric distribution comparison");
    Common ev_c;
    std::string ev_gen, ev_real, ev_out;
    ev->add_option("--gen", ev_gen, "generated corpus JSONL")->required();
    ev->add_option("--real", ev_real, "reference corpus JSONL")->required();
    ev->add_option("--out", ev_out, "output report JSON")->required();
    add_common(ev, ev_c);
    ev->callback([&] {
        RunContext ctx;
        ctx.command = "eval";
        ctx.cfg = resolve_config(ev_c);
        const ActivityTaxonomy tax = resolve_taxonomy(ev_c);
        const Corpus gen_corpus = load_corpus(ev_gen, tax);
        const Corpus real_corpus = load_corpus(ev_real, tax);
        eval::EvalReport report = eval::evaluate(gen_corpus, real_corpus, tax);
        report.config_hash = ctx.cfg.hash();
        atomic_write(ev_out, report.to_json() + "\n");
        for (const std::string& w : report.warnings) {
            std::cerr << "warning: " << w << "\n";
        }
        ctx.inputs = {ev_gen, ev_real};
        if (!ev_c.taxonomy_path.empty()) ctx.inputs.push_back(ev_c.taxonomy_path);
        ctx.outputs = {ev_out};
        write_manifests(ctx);
    });

    // trace
    auto* trc = app.add_subcommand("trace", "per-level intensity trace CSV for one sequence");
    Common trc_c;
    std::string trc_ckpt, trc_data, trc_out;
    int trc_index = 0;
    trc->add_option("--ckpt", trc_ckpt, "model checkpoint JSON")->required();
    trc->add_option("--data", trc_data, "corpus JSONL supplying the event sequence")->required();
    trc->add_option("--index", trc_index, "sequence index within the corpus (default 0)");
    trc->add_option("--out", trc_out, "output CSV path")->required();
    add_common(trc, trc_c);
    trc->callback([&] {
        RunContext ctx;
        ctx.command = "trace";
        ctx.cfg = resolve_config(trc_c);
        const ActivityTaxonomy tax = resolve_taxonomy(trc_c);
        const auto model = train::Model::load(ctx.cfg, tax, trc_ckpt);
        const Corpus corpus = load_corpus(trc_data, tax);
        if (trc_index < 0 || static_cast<std::size_t>(trc_index) >= corpus.size()) {
            throw ValidationError("--index out of range: corpus has " +
                                  std::to_string(corpus.size()) + " sequences");
        }
        eval::export_intensity_trace(model->nets, model->head, tax,
                                     corpus[static_cast<std::size_t>(trc_index)],
                                     ctx.cfg.delta, trc_out);
        ctx.inputs = {trc_ckpt, trc_data};
        ctx.outputs = {trc_out};
        write_manifests(ctx);
    });

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "central-difference gradient self-check");
    Common gc_c;
    add_common(gc, gc_c);
    gc->callback([&] {
        const Config cfg = resolve_config(gc_c);
        double worst = 0.0;
        for (std::uint64_t s = cfg.seed; s < cfg.seed + 3; ++s) {
            for (const check::PathCheck& r : check::gradient_path_checks(s)) {
                std::cout << "path=" << r.path << " seed=" << s
                          << " max_rel_err=" << r.max_rel_err << "\n";
                worst = std::max(worst, r.max_rel_err);
            }
        }
        std::cout << "worst=" << worst << " tolerance=" << kGradTolerance << "\n";
        rc = worst < kGradTolerance ? 0 : 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const StallError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
