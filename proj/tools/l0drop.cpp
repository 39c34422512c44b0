#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "l0drop/analysis.hpp"
#include "l0drop/checkpoint.hpp"
#include "l0drop/config.hpp"
#include "l0drop/corpus.hpp"
#include "l0drop/errors.hpp"
#include "l0drop/inference.hpp"
#include "l0drop/manifest.hpp"
#include "l0drop/patterns.hpp"
#include "l0drop/sparse_decode.hpp"
#include "l0drop/trainer.hpp"

namespace fs = std::filesystem;
using namespace l0drop;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Options shared by every subcommand.
struct Common {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string numeric = "verify";
    std::string out;
};

struct PatternFlags {
    std::string kind;
    double coverage = 0.0;
    std::string tags_file;
    std::string drop_tags;
};

struct Options {
    Common common;
    PatternFlags pattern;
    // prepare
    std::string task;
    std::string src_file, tgt_file;
    // train / finetune
    std::string data;
    std::string init;
    std::string resume;
    std::optional<double> lambda;
    // decode
    std::string checkpoint;
    std::string input;
    std::size_t beam = 4;
    double length_penalty = 0.6;
    bool sparse = true;
    bool dense = false;
    bool gate_dump = false;
    // bench
    std::vector<std::size_t> bench_n{64, 1024};
    std::vector<double> bench_sparsity{0.0, 0.4, 0.7};
    std::size_t bench_m = 64, bench_d = 64, bench_heads = 4, bench_reps = 5;
    // analyze
    std::string which = "attention_mass";
    std::string baseline;
    std::size_t limit = 0;
};

ConfigMap load_config(const Common& c) {
    ConfigMap cfg = c.config_path.empty() ? ConfigMap{} : ConfigMap::load(c.config_path);
    cfg.check_known(known_config_keys());
    if (c.seed_given) {
        cfg.set("seed", std::to_string(c.seed));
    }
    if (c.numeric != "verify" && c.numeric != "fast") {
        throw ConfigError("--mode must be verify or fast");
    }
    cfg.set("numeric", c.numeric);
    return cfg;
}

fs::path out_dir(const Common& c) {
    if (c.out.empty()) {
        throw ConfigError("--out is required");
    }
    fs::create_directories(c.out);
    return c.out;
}

RunManifest start_manifest(const std::string& command, const ConfigMap& cfg) {
    RunManifest m;
    m.command = command;
    m.config = cfg.values();
    m.seed = cfg.get_uint("seed", 1);
    return m;
}

void hash_if_checkpoint(RunManifest& man, const fs::path& p) {
    if (fs::is_regular_file(p) && p.extension() == ".ckpt") {
        man.checkpoint_hashes[p.string()] = git_blob_hash_file(p);
    }
}

void finish_manifest(RunManifest& man, const fs::path& dir) {
    for (const auto& p : man.inputs) {
        hash_if_checkpoint(man, p);
    }
    for (const auto& p : man.outputs) {
        hash_if_checkpoint(man, p);
    }
    man.write(dir / "manifest.json");
}

GatePlacement placement_from(const ConfigMap& cfg, std::size_t layers) {
    return place_gates(parse_placement(cfg.get("placement", "top")), layers);
}

HardConcreteParams hc_from(const ConfigMap& cfg) {
    HardConcreteParams hc;
    hc.beta = cfg.get_double("beta", hc.beta);
    hc.eps = cfg.get_double("eps", hc.eps);
    hc.validate();
    return hc;
}

void check_vocab(const CheckpointInfo& info, const Corpus& c) {
    if (info.src_vocab_hash != c.src_vocab.hash() || info.tgt_vocab_hash != c.tgt_vocab.hash()) {
        throw DataError("vocabulary of the prepared data does not match the checkpoint");
    }
}

SparsityPattern build_pattern(const PatternFlags& f, const ConfigMap& cfg, const Corpus* corpus) {
    const auto kind = parse_pattern_kind(f.kind);
    switch (kind) {
        case SparsityPattern::Kind::group:
            return SparsityPattern::group();
        case SparsityPattern::Kind::tag: {
            const std::string tags = f.drop_tags.empty() ? cfg.get("drop_tags", "") : f.drop_tags;
            if (tags.empty()) {
                throw ConfigError("tag pattern needs --drop-tags or drop_tags");
            }
            return SparsityPattern::tag(parse_tag_set(tags));
        }
        case SparsityPattern::Kind::freq:
        case SparsityPattern::Kind::inv_freq: {
            if (!corpus) {
                throw ConfigError("frequency patterns need --data to count token frequencies");
            }
            const double cov = f.coverage > 0.0 ? f.coverage : cfg.get_double("coverage", 0.0);
            std::vector<Sentence> toks;
            for (const auto& s : corpus->src) {
                toks.push_back(corpus->src_vocab.decode(s));
            }
            return SparsityPattern::frequency(FrequencyTable::from_corpus(toks), cov,
                                              kind == SparsityPattern::Kind::inv_freq);
        }
    }
    throw ConfigError("unknown pattern");
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

// ---- prepare --------------------------------------------------------------

int cmd_prepare(const Options& o) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o.common);
    const auto dir = out_dir(o.common);
    auto man = start_manifest("prepare", cfg);
    Corpus c;
    if (!o.src_file.empty() || !o.tgt_file.empty()) {
        if (o.src_file.empty() || o.tgt_file.empty()) {
            throw ConfigError("prepare needs both --src and --tgt");
        }
        c = corpus_from_pairs(read_parallel(o.src_file, o.tgt_file));
        man.inputs = {o.src_file, o.tgt_file};
        if (!o.pattern.tags_file.empty()) {
            c.tags = read_sentences(o.pattern.tags_file);
            man.inputs.push_back(o.pattern.tags_file);
        }
    } else {
        const std::string task = o.task.empty() ? cfg.get("task", "copy") : o.task;
        c = make_toy_corpus(parse_toy_task(task), cfg.get_uint("vocab", 50), cfg.get_uint("min_len", 5),
                            cfg.get_uint("max_len_toy", 20), cfg.get_uint("size", 10000), cfg.get_uint("seed", 1));
        man.config["task"] = task;
    }
    c.validate();
    save_corpus(dir, c);
    for (const char* f : {"src.vocab", "tgt.vocab", "train.src.ids", "train.tgt.ids"}) {
        man.outputs.push_back((dir / f).string());
    }
    if (!c.tags.empty()) {
        man.outputs.push_back((dir / "train.tags").string());
    }
    std::cout << "prepared " << c.size() << " pairs; src vocab " << c.src_vocab.size() << ", tgt vocab "
              << c.tgt_vocab.size() << '\n';
    man.timing["total"] = seconds_since(t0);
    finish_manifest(man, dir);
    return 0;
}

// ---- train / finetune -----------------------------------------------------

template <class T>
int run_training(const Options& o, bool finetune) {
    const auto t0 = Clock::now();
    auto cfg = load_config(o.common);
    const auto dir = out_dir(o.common);
    if (o.data.empty()) {
        throw ConfigError("--data is required");
    }
    if (o.lambda) {
        cfg.set("lambda", fmt(*o.lambda));
    }
    const Corpus corpus = load_corpus(o.data);
    auto man = start_manifest(finetune ? "finetune" : "train", cfg);
    man.inputs.push_back(o.data);

    TrainConfig tc = train_config_from(cfg);
    std::vector<std::vector<T>> masks;
    if (finetune) {
        if (!o.pattern.kind.empty()) {
            tc.mode = TrainMode::finetune_pattern;
            masks = pattern_masks<T>(build_pattern(o.pattern, cfg, &corpus), corpus);
        } else if (!cfg.has("mode")) {
            tc.mode = TrainMode::finetune_l0drop;
        }
    } else if (!cfg.has("mode")) {
        tc.mode = tc.lambda > 0.0 ? TrainMode::scratch_l0drop : TrainMode::pretrain;
    }
    tc.validate();

    TrainState<T> st;
    if (!o.resume.empty()) {
        CheckpointInfo info;
        st = load_checkpoint<T>(o.resume, &info);
        check_vocab(info, corpus);
        man.inputs.push_back(o.resume);
    } else if (finetune) {
        if (o.init.empty()) {
            throw ConfigError("finetune needs --init (a trained baseline checkpoint)");
        }
        CheckpointInfo info;
        const auto base = load_checkpoint<T>(o.init, &info);
        check_vocab(info, corpus);
        man.inputs.push_back(o.init);
        st = make_train_state(with_gates(base.model, base.model.placement), tc);
    } else {
        ModelConfig mc = model_config_from(cfg);
        mc.src_vocab = corpus.src_vocab.size();
        mc.tgt_vocab = corpus.tgt_vocab.size();
        mc.validate();
        RngState init_rng(tc.seed, kInitStream);
        st = make_train_state(init_model<T>(mc, init_rng, placement_from(cfg, mc.layers), hc_from(cfg)), tc);
    }

    const CheckpointInfo info{corpus.src_vocab.hash(), corpus.tgt_vocab.hash(), tc};
    std::ofstream log(dir / "train.log", o.resume.empty() ? std::ios::trunc : std::ios::app);
    TrainHooks hooks;
    hooks.on_log = [&](const LogRecord& r) {
        const auto line = format_log_record(r);
        log << line << '\n';
        std::cout << line << '\n';
    };
    hooks.on_checkpoint = [&](std::size_t step) {
        save_checkpoint(dir / ("step" + std::to_string(step) + ".ckpt"), st, info);
    };
    train(st, corpus, tc, hooks, masks.empty() ? nullptr : &masks);
    const auto ck = dir / "model.ckpt";
    save_checkpoint(ck, st, info);
    man.outputs = {ck.string(), (dir / "train.log").string()};
    man.timing["total"] = seconds_since(t0);
    finish_manifest(man, dir);
    return 0;
}

// ---- decode ---------------------------------------------------------------

GateMode gate_mode_for(const CheckpointInfo& info, bool pattern) {
    if (pattern) {
        return GateMode::fixed;
    }
    return uses_learned_gates(info.train.mode) ? GateMode::eval : GateMode::disabled;
}

template <class T>
int run_decode(const Options& o) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o.common);
    const auto dir = out_dir(o.common);
    if (o.checkpoint.empty() || o.input.empty() || o.data.empty()) {
        throw ConfigError("decode needs --checkpoint, --input and --data");
    }
    CheckpointInfo info;
    const auto st = load_checkpoint<T>(o.checkpoint, &info);
    const Corpus corpus = load_corpus(o.data);
    check_vocab(info, corpus);
    const auto inputs = read_sentences(o.input);
    if (inputs.empty()) {
        throw DataError("input file " + o.input + " is empty");
    }
    std::vector<std::vector<std::string>> tags;
    if (!o.pattern.tags_file.empty()) {
        tags = read_sentences(o.pattern.tags_file);
        if (tags.size() != inputs.size()) {
            throw DataError("tags file has " + std::to_string(tags.size()) + " lines for " +
                            std::to_string(inputs.size()) + " input sentences");
        }
    }
    const bool use_pattern = !o.pattern.kind.empty();
    std::optional<SparsityPattern> pattern;
    if (use_pattern) {
        pattern = build_pattern(o.pattern, cfg, &corpus);
    }

    DecodeOptions opt;
    opt.sparse = !o.dense;
    opt.beam = o.beam;
    opt.length_penalty = o.length_penalty;
    opt.gate_mode = gate_mode_for(info, use_pattern);
    if (opt.beam == 0) {
        throw ConfigError("--beam must be positive");
    }

    auto man = start_manifest("decode", cfg);
    man.config["beam"] = std::to_string(opt.beam);
    man.config["length_penalty"] = fmt(opt.length_penalty);
    man.config["memory"] = opt.sparse ? "sparse" : "dense";
    if (use_pattern) {
        man.config["pattern"] = o.pattern.kind;
    }
    man.inputs = {o.checkpoint, o.input, o.data};

    std::ofstream out(dir / "output.txt"), rep(dir / "sparsity.txt");
    std::ofstream dump;
    if (o.gate_dump) {
        dump.open(dir / "gates.txt");
    }
    const WarningSink warn = [](const std::string& w) { std::cerr << w << '\n'; };
    std::vector<GateSet<T>> all;
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        const auto ids = corpus.src_vocab.encode(inputs[s]);
        std::vector<T> fixed;
        if (pattern) {
            const auto g = mask_sentence(*pattern, inputs[s], tags.empty() ? nullptr : &tags[s]);
            fixed.assign(g.begin(), g.end());
        }
        auto tr = translate(st.model, ids, opt, std::span<const T>(fixed), warn);
        out << join_tokens(corpus.tgt_vocab.decode(tr.tokens)) << '\n';
        if (opt.gate_mode != GateMode::disabled) {
            const double rate = tr.gates.non_pad() ? static_cast<double>(tr.gates.closed()) / tr.gates.non_pad() : 0.0;
            rep << "sentence=" << s << " sparsity=" << fmt(rate) << '\n';
            if (dump.is_open()) {
                dump << gate_report_line<T>(inputs[s], tr.gates) << '\n';
            }
            all.push_back(std::move(tr.gates));
        } else {
            rep << "sentence=" << s << " sparsity=0\n";
        }
    }
    const double corpus_rate = all.empty() ? 0.0 : sparsity_rate<T>(all);
    rep << "corpus sparsity=" << fmt(corpus_rate) << '\n';
    std::cout << "decoded " << inputs.size() << " sentences; corpus sparsity " << fmt(corpus_rate) << '\n';
    man.outputs = {(dir / "output.txt").string(), (dir / "sparsity.txt").string()};
    if (o.gate_dump) {
        man.outputs.push_back((dir / "gates.txt").string());
    }
    man.timing["total"] = seconds_since(t0);
    finish_manifest(man, dir);
    return 0;
}

// ---- bench ----------------------------------------------------------------

template <class T>
int run_bench(const Options& o) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o.common);
    const auto dir = out_dir(o.common);
    auto man = start_manifest("bench", cfg);
    std::ofstream out(dir / "bench.txt");
    for (auto n : o.bench_n) {
        for (double sp : o.bench_sparsity) {
            const auto r = bench_cross_attention<T>(n, sp, o.bench_m, o.bench_d, o.bench_heads, o.bench_reps,
                                                    cfg.get_uint("seed", 7));
            out << format_bench_record(r) << '\n';
            std::cout << format_bench_record(r) << '\n';
        }
    }
    man.outputs.push_back((dir / "bench.txt").string());
    if (!o.checkpoint.empty()) {
        if (o.data.empty()) {
            throw ConfigError("end-to-end timing needs --data alongside --checkpoint");
        }
        CheckpointInfo info;
        const auto st = load_checkpoint<T>(o.checkpoint, &info);
        const Corpus corpus = load_corpus(o.data);
        check_vocab(info, corpus);
        const std::size_t n = o.limit ? std::min(o.limit, corpus.size()) : corpus.size();
        std::ofstream e2e(dir / "decode_timing.txt");
        double dense_s = 0.0;
        for (bool sparse : {false, true}) {
            DecodeOptions opt;
            opt.sparse = sparse;
            opt.beam = o.beam;
            opt.length_penalty = o.length_penalty;
            opt.gate_mode = gate_mode_for(info, false);
            const auto s0 = Clock::now();
            for (std::size_t i = 0; i < n; ++i) {
                translate(st.model, corpus.src[i], opt);
            }
            const double secs = seconds_since(s0);
            if (!sparse) {
                dense_s = secs;
            }
            e2e << "memory=" << (sparse ? "sparse" : "dense") << " sentences=" << n << " seconds=" << fmt(secs);
            if (sparse) {
                e2e << " speedup=" << fmt(dense_s / secs);
            }
            e2e << '\n';
        }
        man.inputs = {o.checkpoint, o.data};
        man.outputs.push_back((dir / "decode_timing.txt").string());
    }
    man.timing["total"] = seconds_since(t0);
    finish_manifest(man, dir);
    return 0;
}

// ---- analyze --------------------------------------------------------------

template <class T>
int run_analyze(const Options& o) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o.common);
    const auto dir = out_dir(o.common);
    if (o.checkpoint.empty() || o.data.empty()) {
        throw ConfigError("analyze needs --checkpoint and --data");
    }
    CheckpointInfo info;
    const auto st = load_checkpoint<T>(o.checkpoint, &info);
    const Corpus corpus = load_corpus(o.data);
    check_vocab(info, corpus);
    auto man = start_manifest("analyze", cfg);
    man.config["which"] = o.which;
    man.inputs = {o.checkpoint, o.data};
    const GateMode mode = gate_mode_for(info, false);

    if (o.which == "attention_mass") {
        const auto rep = attention_mass(st.model, corpus, mode, o.limit);
        std::ofstream csv(dir / "attention_mass.csv");
        csv << "mass\n" << std::setprecision(9);
        for (double v : rep.masses) {
            csv << v << '\n';
        }
        std::ofstream sum(dir / "attention_mass_summary.txt");
        sum << "mean=" << fmt(rep.mean) << " fraction_below_" << rep.threshold << "=" << fmt(rep.fraction_below)
            << " words=" << rep.masses.size() << '\n';
        std::cout << "mean summed attention " << fmt(rep.mean) << "; " << fmt(100.0 * rep.fraction_below)
                  << "% of retained words below " << rep.threshold << '\n';
        man.outputs = {(dir / "attention_mass.csv").string(), (dir / "attention_mass_summary.txt").string()};
    } else if (o.which == "entropy") {
        if (mode != GateMode::eval) {
            throw ConfigError("entropy analysis needs a checkpoint trained with learned gates");
        }
        const auto split = expected_gate_sets(st.model, corpus, o.limit);
        std::ofstream out(dir / "entropy.txt");
        const auto gated = entropy_split(st.model, corpus, split);
        out << "model=gated retained_mean=" << fmt(gated.retained_mean) << " pruned_mean=" << fmt(gated.pruned_mean)
            << " retained=" << gated.retained << " pruned=" << gated.pruned << '\n';
        if (!o.baseline.empty()) {
            CheckpointInfo binfo;
            const auto base = load_checkpoint<T>(o.baseline, &binfo);
            check_vocab(binfo, corpus);
            const auto b = entropy_split(base.model, corpus, split);
            out << "model=baseline retained_mean=" << fmt(b.retained_mean) << " pruned_mean=" << fmt(b.pruned_mean)
                << " retained=" << b.retained << " pruned=" << b.pruned << '\n';
            man.inputs.push_back(o.baseline);
        }
        std::cout << "retained entropy " << fmt(gated.retained_mean) << ", pruned entropy "
                  << fmt(gated.pruned_mean) << '\n';
        man.outputs = {(dir / "entropy.txt").string()};
    } else {
        throw ConfigError("--which must be attention_mass or entropy");
    }
    man.timing["total"] = seconds_since(t0);
    finish_manifest(man, dir);
    return 0;
}

template <template <class> class F>
int dispatch(const Options& o) {
    return o.common.numeric == "fast" ? F<float>::run(o) : F<double>::run(o);
}

template <class T>
struct Train {
    static int run(const Options& o) { return run_training<T>(o, false); }
};
template <class T>
struct Finetune {
    static int run(const Options& o) { return run_training<T>(o, true); }
};
template <class T>
struct Decode {
    static int run(const Options& o) { return run_decode<T>(o); }
};
template <class T>
struct Bench {
    static int run(const Options& o) { return run_bench<T>(o); }
};
template <class T>
struct Analyze {
    static int run(const Options& o) { return run_analyze<T>(o); }
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "key=value configuration file")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&c](const std::uint64_t& s) {
            c.seed = s;
            c.seed_given = true;
        },
        "run seed (overrides the config)");
    sub->add_option("--mode", c.numeric, "numeric mode: verify (64-bit) or fast (32-bit)")
        ->check(CLI::IsMember({"verify", "fast"}));
    sub->add_option("--out", c.out, "output directory")->required();
}

void add_pattern(CLI::App* sub, PatternFlags& p) {
    sub->add_option("--pattern", p.kind, "rule-based pattern: tag, freq, inv-freq or group")
        ->check(CLI::IsMember({"tag", "freq", "inv-freq", "group"}));
    sub->add_option("--coverage", p.coverage, "corpus coverage for frequency patterns");
    sub->add_option("--tags-file", p.tags_file, "one line of tags per sentence");
    sub->add_option("--drop-tags", p.drop_tags, "comma-separated tags dropped by the tag pattern");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"L0Drop encoder-output sparsification toolkit"};
    app.require_subcommand(1);
    Options o;

    auto* prepare = app.add_subcommand("prepare", "build vocabularies and an id-encoded corpus");
    add_common(prepare, o.common);
    prepare->add_option("--task", o.task, "toy task: copy, reverse or sorted");
    prepare->add_option("--src", o.src_file, "source text, one sentence per line");
    prepare->add_option("--tgt", o.tgt_file, "target text, one sentence per line");
    prepare->add_option("--tags-file", o.pattern.tags_file, "source tags, one line per sentence");

    auto* train = app.add_subcommand("train", "train a model (baseline, or with L0Drop from scratch)");
    add_common(train, o.common);
    train->add_option("--data", o.data, "prepared corpus directory");
    train->add_option("--lambda", o.lambda, "L0 penalty weight");
    train->add_option("--resume", o.resume, "continue from a checkpoint");

    auto* finetune = app.add_subcommand("finetune", "finetune a baseline with L0Drop or a rule-based pattern");
    add_common(finetune, o.common);
    finetune->add_option("--data", o.data, "prepared corpus directory");
    finetune->add_option("--init", o.init, "baseline checkpoint");
    finetune->add_option("--lambda", o.lambda, "L0 penalty weight");
    finetune->add_option("--resume", o.resume, "continue from a checkpoint");
    add_pattern(finetune, o.pattern);

    auto* decode = app.add_subcommand("decode", "translate a text file");
    add_common(decode, o.common);
    decode->add_option("--checkpoint", o.checkpoint, "model checkpoint");
    decode->add_option("--data", o.data, "prepared corpus directory holding the vocabularies");
    decode->add_option("--input", o.input, "source text, one sentence per line");
    decode->add_option("--beam", o.beam, "beam size");
    decode->add_option("--length-penalty", o.length_penalty, "length penalty exponent");
    decode->add_flag("--sparse", o.sparse, "attend over the compacted memory (default)");
    decode->add_flag("--dense", o.dense, "attend over the full gated memory");
    decode->add_flag("--gate-dump", o.gate_dump, "write per-token gates to gates.txt");
    add_pattern(decode, o.pattern);

    auto* bench = app.add_subcommand("bench", "time count-softmax against dense cross-attention");
    add_common(bench, o.common);
    bench->add_option("--n", o.bench_n, "source lengths");
    bench->add_option("--sparsity", o.bench_sparsity, "sparsity rates");
    bench->add_option("--m", o.bench_m, "decoder steps");
    bench->add_option("--d", o.bench_d, "model width");
    bench->add_option("--heads", o.bench_heads, "attention heads");
    bench->add_option("--reps", o.bench_reps, "repetitions (median reported)");
    bench->add_option("--checkpoint", o.checkpoint, "also time end-to-end decoding with this model");
    bench->add_option("--data", o.data, "prepared corpus for end-to-end timing");
    bench->add_option("--limit", o.limit, "sentences to decode (0: all)");
    bench->add_option("--beam", o.beam, "beam size for end-to-end timing");

    auto* analyze = app.add_subcommand("analyze", "attention-mass and entropy analyses");
    add_common(analyze, o.common);
    analyze->add_option("--checkpoint", o.checkpoint, "model checkpoint");
    analyze->add_option("--data", o.data, "prepared corpus directory");
    analyze->add_option("--which", o.which, "attention_mass or entropy")
        ->check(CLI::IsMember({"attention_mass", "entropy"}));
    analyze->add_option("--baseline", o.baseline, "baseline checkpoint for the entropy comparison");
    analyze->add_option("--limit", o.limit, "sentences to analyse (0: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::config);
    }
    if (o.dense && decode->count("--sparse")) {
        std::cerr << "error: --sparse and --dense are mutually exclusive\n";
        return static_cast<int>(ExitCode::config);
    }

    try {
        if (*prepare) {
            return cmd_prepare(o);
        }
        if (*train) {
            return dispatch<Train>(o);
        }
        if (*finetune) {
            return dispatch<Finetune>(o);
        }
        if (*decode) {
            return dispatch<Decode>(o);
        }
        if (*bench) {
            return dispatch<Bench>(o);
        }
        return dispatch<Analyze>(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::failure);
    }
}
