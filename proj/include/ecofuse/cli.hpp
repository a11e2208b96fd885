#pragma once

// Command line front end. run_cli is the whole tool: the binary's main just
// forwards argv, so tests can drive every subcommand in process. Exit codes:
// 0 success, 1 usage or configuration error, 2 data or model error. Every
// successful run echoes its fully resolved configuration as the first line.

#include <cstdlib>
#include <set>
#include <sstream>

#include "ecofuse/analysis.hpp"
#include "ecofuse/bench.hpp"

namespace ecofuse {

class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace cli_detail {

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

class Options {
  public:
    void declare(const std::string& name, const std::string& def) {
        names_.push_back(name);
        values_[name] = def;
    }

    bool known(const std::string& name) const { return values_.count(name) > 0; }

    std::string suggest(const std::string& name) const {
        std::string best;
        std::size_t best_d = 4;  // suggestions only within edit distance 3
        for (const std::string& n : names_) {
            const std::size_t d = levenshtein(name, n);
            if (d < best_d) {
                best_d = d;
                best = n;
            }
        }
        return best;
    }

    void set_flag(const std::string& name, const std::string& value) {
        if (!known(name)) {
            std::string hint = suggest(name);
            throw UsageError("unknown flag --" + name +
                             (hint.empty() ? "" : " (did you mean --" + hint + "?)"));
        }
        values_[name] = value;
        set_by_flag_.insert(name);
        set_any_.insert(name);
    }

    void merge_config_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("config: cannot open " + path);
        std::string line;
        std::size_t lineno = 0;
        std::set<std::string> seen;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw UsageError(path + ":" + std::to_string(lineno) +
                                 ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (!seen.insert(key).second)
                throw UsageError(path + ":" + std::to_string(lineno) + ": duplicate key " +
                                 key);
            if (!known(key))
                throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key " +
                                 key);
            if (set_by_flag_.count(key)) continue;  // flags win over the file
            values_[key] = value;
            set_any_.insert(key);
        }
    }

    void apply_env_seed() {
        if (!known("seed") || set_any_.count("seed")) return;
        if (const char* env = std::getenv("ECOFUSE_SEED")) {
            values_["seed"] = env;
            set_any_.insert("seed");
        }
    }

    const std::string& get(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw std::runtime_error("cli: undeclared option " + name);
        return it->second;
    }

    std::uint64_t get_u64(const std::string& name) const {
        const std::string& s = get(name);
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError("flag --" + name + " expects an unsigned integer, got '" + s +
                             "'");
        }
    }

    double get_double(const std::string& name) const {
        const std::string& s = get(name);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError("flag --" + name + " expects a number, got '" + s + "'");
        }
    }

    bool get_onoff(const std::string& name) const {
        const std::string& s = get(name);
        if (s == "on") return true;
        if (s == "off") return false;
        throw UsageError("flag --" + name + " expects on or off, got '" + s + "'");
    }

    std::string echo(const std::string& command) const {
        std::ostringstream os;
        os << "config: command=" << command;
        for (const std::string& n : names_) os << " " << n << "=" << values_.at(n);
        return os.str();
    }

  private:
    std::vector<std::string> names_;
    std::map<std::string, std::string> values_;
    std::set<std::string> set_by_flag_, set_any_;
};

inline void parse_flags(Options& opts, const std::vector<std::string>& args,
                        std::size_t begin) {
    for (std::size_t i = begin; i < args.size(); i += 2) {
        const std::string& arg = args[i];
        if (arg.size() < 3 || arg.rfind("--", 0) != 0)
            throw UsageError("expected a --flag, got '" + arg + "'");
        if (i + 1 >= args.size()) throw UsageError("flag " + arg + " needs a value");
        opts.set_flag(arg.substr(2), args[i + 1]);
    }
    if (opts.known("config") && !opts.get("config").empty())
        opts.merge_config_file(opts.get("config"));
    opts.apply_env_seed();
}

inline PsiMode parse_psi(const Options& o) {
    const std::string& s = o.get("psi");
    if (s == "squared-relu") return PsiMode::squared_relu;
    if (s == "relu") return PsiMode::plain_relu;
    throw UsageError("flag --psi expects squared-relu or relu, got '" + s + "'");
}

inline Phi parse_phi(const Options& o) {
    const std::string& s = o.get("phi");
    if (s == "swish") return Phi::swish;
    if (s == "identity") return Phi::identity;
    throw UsageError("flag --phi expects swish or identity, got '" + s + "'");
}

inline Modality parse_modality(const Options& o) {
    const std::string& s = o.get("modality");
    if (s == "both") return Modality::both;
    if (s == "lip") return Modality::lip;
    if (s == "hand") return Modality::hand;
    throw UsageError("flag --modality expects both, lip or hand, got '" + s + "'");
}

inline std::vector<std::size_t> parse_sweep(const Options& o) {
    std::vector<std::size_t> out;
    std::istringstream ss(o.get("sweep"));
    std::string piece;
    while (std::getline(ss, piece, ',')) {
        piece = trim(piece);
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(piece, &used));
            if (used != piece.size()) throw std::invalid_argument(piece);
        } catch (const std::exception&) {
            throw UsageError("flag --sweep expects comma separated lengths, got '" +
                             o.get("sweep") + "'");
        }
    }
    if (out.empty()) throw UsageError("flag --sweep expects at least one length");
    return out;
}

inline std::vector<double> read_sample_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("samples: cannot open " + path);
    std::vector<double> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stod(line, &used));
            if (used != line.size()) throw std::invalid_argument(line);
        } catch (const std::exception&) {
            throw std::runtime_error("samples: " + path + ":" + std::to_string(lineno) +
                                     ": not a number");
        }
    }
    return out;
}

inline const char* usage_text() {
    return "usage: ecofuse <command> [--flag value ...]\n"
           "commands:\n"
           "  gen-data   write a synthetic two-modality dataset as jsonl\n"
           "  train      fit a fusion model (or the quadratic baseline) and save it\n"
           "  eval       report frame accuracy of a checkpoint on a dataset\n"
           "  bench      exact MAC accounting sweep with analytic cross-checks\n"
           "  analyze    tur | cur | spectrum | ztest\n"
           "common flags: --config file.cfg (key = value lines), --seed n\n"
           "(ECOFUSE_SEED in the environment seeds any command lacking --seed)\n";
}

// ---- subcommands ----

inline int cmd_gen_data(const std::vector<std::string>& args, std::ostream& out) {
    Options o;
    o.declare("config", "");
    o.declare("out", "data.jsonl");
    o.declare("sequences", "500");
    o.declare("seed", "1");
    o.declare("task-seed", "1");  // class embeddings; keep fixed across splits
    o.declare("phonemes", "40");
    o.declare("lip-classes", "10");
    o.declare("hand-classes", "8");
    o.declare("frames", "96");
    o.declare("feature-dim", "64");
    o.declare("sigma", "0.3");
    o.declare("delta", "2");
    o.declare("seg-min", "4");
    o.declare("seg-max", "10");
    parse_flags(o, args, 1);

    TaskSpec spec;
    spec.phonemes = o.get_u64("phonemes");
    spec.lip_classes = o.get_u64("lip-classes");
    spec.hand_classes = o.get_u64("hand-classes");
    spec.frames = o.get_u64("frames");
    spec.feature_dim = o.get_u64("feature-dim");
    spec.sigma = o.get_double("sigma");
    spec.delta = o.get_u64("delta");
    spec.seg_min = o.get_u64("seg-min");
    spec.seg_max = o.get_u64("seg-max");
    spec.seed = o.get_u64("task-seed");
    try {
        spec.validate();
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }

    out << o.echo("gen-data") << "\n";
    spec.build_embeddings();
    std::vector<SequenceRecord> records =
        generate(spec, o.get_u64("sequences"), o.get_u64("seed"));
    save_jsonl(records, spec, o.get("out"));
    out << "wrote " << records.size() << " sequences to " << o.get("out") << "\n";
    return 0;
}

inline int cmd_train(const std::vector<std::string>& args, std::ostream& out) {
    Options o;
    o.declare("config", "");
    o.declare("data", "data.jsonl");
    o.declare("out", "model.bin");
    o.declare("layers", "2");
    o.declare("dm", "64");
    o.declare("d", "32");
    o.declare("chunk", "32");
    o.declare("topk", "4");
    o.declare("kernel", "3");
    o.declare("psi", "squared-relu");
    o.declare("phi", "swish");
    o.declare("gate", "on");
    o.declare("fusion", "on");
    o.declare("baseline", "off");
    o.declare("heads", "4");
    o.declare("epochs", "15");
    o.declare("lr", "0.002");
    o.declare("warmup", "200");
    o.declare("log-every", "100");
    o.declare("seed", "1");
    parse_flags(o, args, 1);

    ModelConfig mc;
    mc.layers = o.get_u64("layers");
    mc.d_m = o.get_u64("dm");
    mc.d = o.get_u64("d");
    mc.chunk = o.get_u64("chunk");
    mc.topk = o.get_u64("topk");
    mc.kernel = o.get_u64("kernel");
    mc.psi = parse_psi(o);
    mc.phi = parse_phi(o);
    mc.gate_on = o.get_onoff("gate");
    mc.fusion_on = o.get_onoff("fusion");
    mc.baseline = o.get_onoff("baseline");
    mc.heads = o.get_u64("heads");
    mc.seed = o.get_u64("seed");
    try {
        mc.validate();
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }

    TrainConfig tc;
    tc.epochs = o.get_u64("epochs");
    tc.lr_peak = o.get_double("lr");
    tc.warmup = o.get_u64("warmup");
    tc.log_every = o.get_u64("log-every");
    tc.seed = o.get_u64("seed");
    if (tc.epochs < 1 || tc.warmup < 1 || tc.log_every < 1 || !(tc.lr_peak > 0.0))
        throw UsageError("training needs epochs, warmup, log-every >= 1 and lr > 0");

    out << o.echo("train") << "\n";
    Dataset ds = load_jsonl(o.get("data"));
    mc.phonemes = ds.spec.phonemes;
    if (ds.spec.feature_dim != mc.d_m)
        throw std::runtime_error("train: dataset feature dim " +
                                 std::to_string(ds.spec.feature_dim) +
                                 " does not match --dm " + std::to_string(mc.d_m));
    Model m = init_model(mc);
    TrainLog log = train(m, ds.records, tc, &out);
    save_model(m, o.get("out"));
    out << "saved " << o.get("out") << " after " << log.steps << " steps, final loss "
        << log.final_loss << "\n";
    return 0;
}

inline int cmd_eval(const std::vector<std::string>& args, std::ostream& out) {
    Options o;
    o.declare("config", "");
    o.declare("model", "model.bin");
    o.declare("data", "data.jsonl");
    o.declare("modality", "both");
    parse_flags(o, args, 1);
    const Modality modality = parse_modality(o);

    out << o.echo("eval") << "\n";
    Model m = load_model(o.get("model"));
    Dataset ds = load_jsonl(o.get("data"));
    EvalResult res = evaluate(m, ds.records, modality);
    out << "accuracy=" << res.accuracy << "\n";
    return 0;
}

inline int cmd_bench(const std::vector<std::string>& args, std::ostream& out) {
    Options o;
    o.declare("config", "");
    o.declare("out", "-");
    o.declare("sweep", "128,256,512,1024,2048");
    o.declare("chunk", "32");
    o.declare("topk", "4");
    o.declare("d", "64");
    o.declare("dm", "256");
    o.declare("kernel", "3");
    o.declare("wall", "off");
    o.declare("threads", "1");
    o.declare("flops", "off");
    parse_flags(o, args, 1);

    BenchConfig bc;
    bc.sweep_t = parse_sweep(o);
    bc.chunk = o.get_u64("chunk");
    bc.topk = o.get_u64("topk");
    bc.d = o.get_u64("d");
    bc.d_m = o.get_u64("dm");
    bc.kernel = o.get_u64("kernel");
    bc.wall_clock = o.get_onoff("wall");
    bc.threads = o.get_u64("threads");
    bc.flops = o.get_onoff("flops");
    try {
        bc.validate();
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }

    out << o.echo("bench") << "\n";
    std::vector<BenchRow> rows = run_bench(bc);
    for (const BenchRow& r : rows)
        if (r.macs_measured != r.macs_analytic)
            throw std::runtime_error("bench: measured " + std::to_string(r.macs_measured) +
                                     " != analytic " + std::to_string(r.macs_analytic) +
                                     " for " + r.component);
    if (o.get("out") == "-") {
        out << "T,C,k,d,dm,component,macs_measured,macs_analytic,wall_ns\n";
        for (const BenchRow& r : rows)
            out << r.T << "," << r.C << "," << r.k << "," << r.d << "," << r.d_m << ","
                << r.component << "," << r.macs_measured << "," << r.macs_analytic << ","
                << r.wall_ns << "\n";
    } else {
        write_bench_csv(o.get("out"), rows);
        out << "wrote " << rows.size() << " rows to " << o.get("out") << "\n";
    }

    const std::uint64_t unit = bc.flops ? 2 : 1;
    const char* label = bc.flops ? "flops" : "macs";
    if (bc.sweep_t.size() >= 2)
        out << "slope baseline=" << component_slope(rows, "baseline")
            << " modality_specific=" << component_slope(rows, "modality_specific") << "\n";
    for (const RatioCheck& c : attention_ratio(rows))
        out << "T=" << c.T << " tiaa_" << label << "=" << c.tiaa * unit << " baseline_"
            << label << "=" << c.baseline * unit
            << " within_quarter=" << (c.within_quarter ? "yes" : "no") << "\n";
    return 0;
}

inline int cmd_analyze(const std::vector<std::string>& args, std::ostream& out) {
    if (args.size() < 2)
        throw UsageError("analyze needs a mode: tur, cur, spectrum or ztest");
    const std::string mode = args[1];

    if (mode == "tur" || mode == "cur") {
        Options o;
        o.declare("config", "");
        o.declare("model", "model.bin");
        o.declare("data", "data.jsonl");
        o.declare("out", mode + ".csv");
        o.declare("bins", "20");
        o.declare("norm", "max");
        o.declare("selection", "on");
        o.declare("max-records", "50");
        parse_flags(o, args, 2);
        HistNorm norm;
        if (o.get("norm") == "max")
            norm = HistNorm::by_max;
        else if (o.get("norm") == "sum")
            norm = HistNorm::by_sum;
        else
            throw UsageError("flag --norm expects max or sum, got '" + o.get("norm") + "'");
        const std::size_t bins = o.get_u64("bins");
        if (bins < 1) throw UsageError("flag --bins must be >= 1");

        out << o.echo("analyze " + mode) << "\n";
        Model m = load_model(o.get("model"));
        Dataset ds = load_jsonl(o.get("data"));
        std::vector<SequenceRecord> records = ds.records;
        if (records.size() > o.get_u64("max-records"))
            records.resize(o.get_u64("max-records"));
        // selection off widens the pick to the whole chunk
        const std::size_t override_k = o.get_onoff("selection") ? 0 : m.cfg.chunk;
        std::vector<double> values;
        if (mode == "tur") {
            values = collect_normalized_tur(m, records, norm, override_k);
        } else {
            values = collect_cur(m, records, override_k);
        }
        write_histogram_csv(o.get("out"), make_histogram(values, bins, 0.0, 1.0));
        out << "wrote " << o.get("out") << "\n";
        out << "n=" << values.size() << " mean=" << mean_of(values)
            << " median=" << median_of(values) << "\n";
        return 0;
    }

    if (mode == "spectrum") {
        Options o;
        o.declare("config", "");
        o.declare("model", "model.bin");
        o.declare("data", "data.jsonl");
        o.declare("out", "spectrum.csv");
        o.declare("max-records", "25");
        parse_flags(o, args, 2);

        out << o.echo("analyze spectrum") << "\n";
        Model m = load_model(o.get("model"));
        Dataset ds = load_jsonl(o.get("data"));
        std::vector<SequenceRecord> records = ds.records;
        if (records.size() > o.get_u64("max-records"))
            records.resize(o.get_u64("max-records"));
        std::vector<Tensor> maps = collect_attention_matrices(m, records);
        std::vector<double> curve = average_spectrum(maps);
        write_spectrum_csv(o.get("out"), curve);
        out << "wrote " << o.get("out") << "\n";
        out << "matrices=" << maps.size() << " size=" << (maps.empty() ? 0 : maps[0].shape[0])
            << "\n";
        return 0;
    }

    if (mode == "ztest") {
        Options o;
        o.declare("config", "");
        o.declare("a", "");
        o.declare("b", "");
        o.declare("out", "ztest.csv");
        parse_flags(o, args, 2);
        if (o.get("a").empty() || o.get("b").empty())
            throw UsageError("analyze ztest needs --a and --b sample files");

        out << o.echo("analyze ztest") << "\n";
        ZTest zt = z_test(read_sample_file(o.get("a")), read_sample_file(o.get("b")));
        write_ztest_csv(o.get("out"), zt);
        out << "z=" << zt.z << " p=" << zt.p << " n_a=" << zt.n_a << " n_b=" << zt.n_b
            << "\n";
        return 0;
    }

    throw UsageError("unknown analyze mode '" + mode + "' (tur, cur, spectrum, ztest)");
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
    try {
        if (args.empty()) {
            err << cli_detail::usage_text();
            return 1;
        }
        const std::string& cmd = args[0];
        if (cmd == "help" || cmd == "--help") {
            out << cli_detail::usage_text();
            return 0;
        }
        if (cmd == "gen-data") return cli_detail::cmd_gen_data(args, out);
        if (cmd == "train") return cli_detail::cmd_train(args, out);
        if (cmd == "eval") return cli_detail::cmd_eval(args, out);
        if (cmd == "bench") return cli_detail::cmd_bench(args, out);
        if (cmd == "analyze") return cli_detail::cmd_analyze(args, out);
        throw UsageError("unknown command '" + cmd + "'");
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        err << cli_detail::usage_text();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace ecofuse
