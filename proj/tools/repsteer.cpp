// repsteer: corpus generation, guidance pretraining, representation-editing
// training, evaluation and distance statistics from the command line.

#include <openssl/evp.h>

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repsteer/checkpoint.hpp"
#include "repsteer/eval.hpp"
#include "repsteer/training.hpp"
#include "repsteer/triples.hpp"

#ifndef REPSTEER_VERSION
#define REPSTEER_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace repsteer;

namespace {

// Run manifest --------------------------------------------------------------------

std::string sha256_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

// Digests every regular file under `p` (or `p` itself), sorted by path.
json digest_inputs(const fs::path& p) {
    json out = json::array();
    std::vector<fs::path> files;
    if (fs::is_directory(p)) {
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else if (fs::is_regular_file(p)) {
        files.push_back(p);
    }
    for (const auto& f : files) out.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}, {"bytes", fs::file_size(f)}});
    return out;
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

class RunManifest {
public:
    RunManifest(fs::path out_dir, std::string command, json config, std::uint64_t seed)
        : dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
        j_ = {{"command", std::move(command)},
              {"version", REPSTEER_VERSION},
              {"seed", seed},
              {"config", std::move(config)},
              {"inputs", json::object()},
              {"outputs", json::array()},
              {"status", "running"},
              {"timings", {{"started_utc", utc_now()}}}};
    }
    void input(const std::string& name, const fs::path& p) { j_["inputs"][name] = digest_inputs(p); }
    void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
    json& results() { return j_["results"]; }
    void write() const {
        fs::create_directories(dir_);
        std::ofstream(dir_ / "run_manifest.json", std::ios::trunc) << j_.dump(2) << "\n";
    }
    void finish() {
        j_["status"] = "complete";
        j_["timings"]["finished_utc"] = utc_now();
        j_["timings"]["wall_ms"] =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        write();
    }

private:
    fs::path dir_;
    std::chrono::steady_clock::time_point start_;
    json j_;
};

// Shared options ----------------------------------------------------------------------

struct Common {
    std::uint64_t seed = 0;
    std::string precision = "f32";
    bool quiet = false;
};

struct TrainFlags {
    TrainConfig cfg;
    std::string kind = "iter";
    std::string layers;  // comma-separated target layers override
    std::string base, positive, negative, data, out;
    bool per_token = false;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool with_kind, bool with_alpha_beta) {
    if (with_kind) {
        sub->add_option("--kind", f.kind, "Loss kind")
            ->check(CLI::IsMember({"cl_ct", "gmp_negative", "cl_mg", "iter", "pure_mg", "lorra_only"}))
            ->capture_default_str();
    }
    if (with_alpha_beta) {
        sub->add_option("--alpha", f.cfg.weights.alpha, "Weight of the pull term")->capture_default_str();
        sub->add_option("--beta", f.cfg.weights.beta, "Weight of the push term")->capture_default_str();
    }
    sub->add_option("--tmax", f.cfg.t_max, "Steps per round")->capture_default_str();
    sub->add_option("--eval-every", f.cfg.eval_every, "Evaluation cadence in steps")->capture_default_str();
    sub->add_option("--lr", f.cfg.learning_rate, "AdamW learning rate")->capture_default_str();
    sub->add_option("--rank", f.cfg.lora.rank, "LoRA rank")->capture_default_str();
    sub->add_option("--lora-scale", f.cfg.lora.scale, "LoRA output scale")->capture_default_str();
    sub->add_option("--batch", f.cfg.batch_size, "Training batch size")->capture_default_str();
    sub->add_option("--eval-batch", f.cfg.eval_batch_size, "Evaluation batch size")->capture_default_str();
    sub->add_option("--layers", f.layers, "Target layers, comma separated (default: from the base checkpoint)");
    sub->add_option("--lorra-sign", f.cfg.lorra_sign, "Sign of the LoRRA term (+1 or -1)")->capture_default_str();
    sub->add_option("--template-targets", f.cfg.template_targets,
                    "Templated bundles from the trained model (trainable) or from it without its adapter, held constant (frozen)")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, TemplateTargets>{{"auto", TemplateTargets::automatic},
                                                   {"trainable", TemplateTargets::trainable},
                                                   {"frozen", TemplateTargets::frozen}}))
        ->default_str("auto");
    sub->add_flag("--full-weights", f.cfg.full_weights, "Train all base weights instead of a LoRA adapter");
    sub->add_flag("--per-token", f.per_token, "Length-normalize choice log-probs in MC1");
    sub->add_option("--base", f.base, "Base checkpoint directory")->required();
    sub->add_option("--data", f.data, "Corpus directory (train.jsonl, eval.jsonl)")->required();
    sub->add_option("--out", f.out, "Output directory")->required();
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": '" + item + "' is not an integer");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

std::vector<double> parse_real_list(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": '" + item + "' is not a number");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

json train_config_json(const TrainConfig& c) {
    return {{"kind", loss_kind_name(c.kind)},
            {"alpha", c.weights.alpha},
            {"beta", c.weights.beta},
            {"t_max", c.t_max},
            {"eval_every", c.eval_every},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"eval_batch_size", c.eval_batch_size},
            {"seed", c.seed},
            {"rounds", c.rounds},
            {"lorra_sign", c.lorra_sign},
            {"template_targets", template_targets_name(c.template_targets)},
            {"full_weights", c.full_weights},
            {"lora", c.lora},
            {"per_token_normalize", c.mc1.per_token_normalize}};
}

json history_json(const std::vector<HistoryRow>& h) {
    json a = json::array();
    for (const auto& r : h) a.push_back({{"step", r.step}, {"round", r.round}, {"loss", r.loss}, {"mc1", r.mc1}});
    return a;
}

// A checkpoint path may name a checkpoint directly or a run directory whose
// result.json points at its best checkpoint.
fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::exists(p / "manifest.json")) return p;
    if (fs::exists(p / "result.json")) {
        std::ifstream in(p / "result.json");
        const json r = json::parse(in, nullptr, false);
        if (!r.is_discarded() && r.contains("best")) return p / r.at("best").get<std::string>();
    }
    throw CheckpointError("not a checkpoint or run directory: " + p.string());
}

struct Data {
    std::vector<TripleRecord> records;
    std::vector<ContrastTriple> train;
    std::vector<McqItem> eval;
};

Data load_data(const fs::path& dir, std::size_t max_seq, bool need_train, bool need_eval) {
    Data d;
    if (need_train) {
        d.records = load_triples(dir / "train.jsonl", max_seq);
        d.train = render_all(d.records, max_seq);
        if (d.train.empty()) throw DataError(dir.string() + "/train.jsonl holds no triples");
    }
    if (need_eval) {
        d.eval = load_mcq(dir / "eval.jsonl");
        if (d.eval.empty()) throw DataError(dir.string() + "/eval.jsonl holds no items");
    }
    return d;
}

LogFn make_log(const Common& c) {
    if (c.quiet) return {};
    return [](const std::string& s) { std::cerr << s << "\n"; };
}

void write_result(const fs::path& out, const json& r) {
    fs::create_directories(out);
    std::ofstream(out / "result.json", std::ios::trunc) << r.dump(2) << "\n";
}

// Commands ------------------------------------------------------------------------------

struct CorpusFlags {
    std::size_t entities = 8, attributes = 4;
    double train_frac = 0.8, eval_frac = 0.2;
    std::string out;
    Templates templates;
};

int cmd_corpus(const Common& c, const CorpusFlags& f) {
    RunManifest man(f.out, "corpus",
                    {{"entities", f.entities},
                     {"attributes", f.attributes},
                     {"train_frac", f.train_frac},
                     {"eval_frac", f.eval_frac},
                     {"pos_template", f.templates.positive},
                     {"neg_template", f.templates.negative}},
                    c.seed);
    const FactWorld world = generate_fact_world(derive_seed(c.seed, "corpus/world"), f.entities, f.attributes);
    const Corpus corpus = emit_corpus(world, {f.train_frac, f.eval_frac}, c.seed, f.templates);
    man.write();
    const fs::path out(f.out);
    save_triples(out / "train.jsonl", corpus.train, TransformerConfig{}.max_seq);
    save_mcq(out / "eval.jsonl", corpus.eval);
    json wj = world;
    wj["templates"] = {{"positive", f.templates.positive}, {"negative", f.templates.negative}};
    write_text_file(out / "world.json", wj.dump(2) + "\n");
    for (const char* n : {"train.jsonl", "eval.jsonl", "world.json"}) man.output(out / n);
    man.results() = {{"n_train", corpus.train.size()}, {"n_eval", corpus.eval.size()}, {"n_facts", world.facts.size()}};
    man.finish();
    std::cout << "train=" << corpus.train.size() << " eval=" << corpus.eval.size() << "\n";
    return 0;
}

struct BaseFlags {
    BasePretrainConfig cfg;
    TransformerConfig model;
    std::string layers;
    std::string data, out;
};

template <typename T>
int cmd_pretrain_base(const Common& c, BaseFlags f) {
    if (!f.layers.empty()) f.model.target_layers = parse_int_list(f.layers, "--layers");
    f.model.validate();
    f.cfg.seed = c.seed;
    RunManifest man(f.out, "pretrain-base",
                    {{"steps", f.cfg.steps}, {"batch_size", f.cfg.batch_size}, {"learning_rate", f.cfg.learning_rate},
                     {"model", f.model}, {"precision", c.precision}},
                    c.seed);
    std::ifstream in(fs::path(f.data) / "world.json");
    if (!in) throw DataError("cannot read " + f.data + "/world.json");
    json wj;
    try {
        wj = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(f.data + "/world.json: " + e.what());
    }
    const FactWorld world = wj.get<FactWorld>();
    Templates tp;
    if (wj.contains("templates")) tp = {wj["templates"].at("positive"), wj["templates"].at("negative")};
    man.input("world", fs::path(f.data) / "world.json");
    man.write();
    Checkpoint<T> ck;
    ck.weights = pretrain_base<T>(f.model, world, tp, f.cfg, make_log(c));
    ck.role = Role::base;
    ck.seed = c.seed;
    save_checkpoint(f.out, ck);
    man.output(f.out);
    man.results() = {{"fingerprint", ck.fingerprint()}};
    man.finish();
    std::cout << "fingerprint=" << ck.fingerprint() << "\n";
    return 0;
}

template <typename T>
Checkpoint<T> load_base(const TrainFlags& f) {
    Checkpoint<T> base = load_checkpoint<T>(resolve_checkpoint(f.base));
    if (base.adapter) base.weights = base.merged();
    base.adapter.reset();
    if (!f.layers.empty()) {
        base.weights.config.target_layers = parse_int_list(f.layers, "--layers");
        base.weights.config.validate();
    }
    return base;
}

template <typename T>
Checkpoint<T> load_guidance(const std::string& path, const TransformerConfig& base_cfg, const char* what) {
    Checkpoint<T> ck = load_checkpoint<T>(resolve_checkpoint(path));
    require_same_architecture(base_cfg, ck.config(), what);
    // Capture settings follow the run, not the checkpoint.
    ck.weights.config.target_layers = base_cfg.target_layers;
    ck.weights.config.normalize_reps = base_cfg.normalize_reps;
    return ck;
}

void finalize_train_cfg(const Common& c, TrainFlags& f) {
    f.cfg.seed = c.seed;
    f.cfg.mc1.per_token_normalize = f.per_token;
    f.cfg.validate();
}

template <typename T>
int cmd_pretrain_guidance(const Common& c, TrainFlags f, const std::string& role_s) {
    const GuidanceRole role = role_s == "positive" ? GuidanceRole::positive : GuidanceRole::negative;
    finalize_train_cfg(c, f);
    const TrainConfig eff = guidance_config(f.cfg, role);
    RunManifest man(f.out, "pretrain-guidance", {{"role", role_s}, {"train", train_config_json(eff)}, {"precision", c.precision}},
                    c.seed);
    const Checkpoint<T> base = load_base<T>(f);
    const Data d = load_data(f.data, static_cast<std::size_t>(base.config().max_seq), true, true);
    man.input("base", resolve_checkpoint(f.base));
    man.input("data", f.data);
    man.write();
    RoundIO io{fs::path(f.out), Role::base, make_log(c)};
    const auto r = pretrain_guidance<T>(base.weights, role, d.train, d.eval, f.cfg, io);
    write_text_file(fs::path(f.out) / "history.csv", history_csv(r.summary.history));
    const std::string best = round_dir_name(0, r.summary.best_step);
    const std::string fin = round_dir_name(0, r.summary.history.back().step);
    write_result(f.out, {{"best", best}, {"final", fin}, {"best_mc1", r.summary.best_mc1},
                         {"final_mc1", r.summary.history.back().mc1}});
    man.output(fs::path(f.out) / best);
    man.output(fs::path(f.out) / fin);
    man.results() = {{"best", best}, {"best_mc1", r.summary.best_mc1}, {"final_mc1", r.summary.history.back().mc1},
                     {"history", history_json(r.summary.history)}};
    man.finish();
    std::cout << "best=" << best << " best_mc1=" << fmt_real(r.summary.best_mc1) << "\n";
    std::cout << "mc1=" << fmt_real(r.summary.history.back().mc1) << "\n";
    return 0;
}

template <typename T>
int cmd_train(const Common& c, TrainFlags f) {
    f.cfg.kind = parse_loss_kind(f.kind);
    finalize_train_cfg(c, f);
    if (needs_guidance(f.cfg.kind) && (f.positive.empty() || f.negative.empty())) {
        throw ConfigError("--kind " + f.kind + " requires --positive and --negative guidance checkpoints");
    }
    RunManifest man(f.out, "train", {{"train", train_config_json(f.cfg)}, {"precision", c.precision}}, c.seed);
    const Checkpoint<T> base = load_base<T>(f);
    std::optional<ModelWeights<T>> gp, gn;
    if (needs_guidance(f.cfg.kind)) {
        gp = load_guidance<T>(f.positive, base.config(), "positive guidance").merged();
        gn = load_guidance<T>(f.negative, base.config(), "negative guidance").merged();
        man.input("positive", resolve_checkpoint(f.positive));
        man.input("negative", resolve_checkpoint(f.negative));
    }
    const Data d = load_data(f.data, static_cast<std::size_t>(base.config().max_seq), true, true);
    man.input("base", resolve_checkpoint(f.base));
    man.input("data", f.data);
    man.write();
    IterState<T> st = make_state(base.weights, d.train.size(), f.cfg, "train");
    const GuidanceSet<T> guide{gp ? &*gp : nullptr, gn ? &*gn : nullptr, 0};
    RoundIO io{fs::path(f.out), Role::finetuned, make_log(c)};
    const auto r = train_round(st, d.train, guide, f.cfg, d.eval, io);
    write_text_file(fs::path(f.out) / "history.csv", history_csv(r.summary.history));
    const std::string best = round_dir_name(0, r.summary.best_step);
    const std::string fin = round_dir_name(0, st.step);
    write_result(f.out, {{"best", best}, {"final", fin}, {"best_mc1", r.summary.best_mc1},
                         {"final_mc1", r.summary.history.back().mc1}});
    man.results() = {{"best", best}, {"best_mc1", r.summary.best_mc1}, {"history", history_json(r.summary.history)}};
    man.finish();
    std::cout << "best=" << best << " best_mc1=" << fmt_real(r.summary.best_mc1) << "\n";
    std::cout << "mc1=" << fmt_real(r.summary.history.back().mc1) << "\n";
    return 0;
}

template <typename T>
int cmd_iter(const Common& c, TrainFlags f) {
    f.cfg.kind = parse_loss_kind(f.kind);
    finalize_train_cfg(c, f);
    if (!needs_guidance(f.cfg.kind)) throw ConfigError("iter needs a guided --kind (cl_mg, iter or pure_mg)");
    if (f.positive.empty() || f.negative.empty()) throw ConfigError("iter requires --positive and --negative");
    RunManifest man(f.out, "iter", {{"train", train_config_json(f.cfg)}, {"precision", c.precision}}, c.seed);
    const Checkpoint<T> base = load_base<T>(f);
    const Checkpoint<T> pos = load_guidance<T>(f.positive, base.config(), "positive guidance");
    const Checkpoint<T> neg = load_guidance<T>(f.negative, base.config(), "negative guidance");
    const Data d = load_data(f.data, static_cast<std::size_t>(base.config().max_seq), true, true);
    man.input("base", resolve_checkpoint(f.base));
    man.input("positive", resolve_checkpoint(f.positive));
    man.input("negative", resolve_checkpoint(f.negative));
    man.input("data", f.data);
    man.write();
    RoundIO io{fs::path(f.out), Role::finetuned, make_log(c)};
    io.save_final = false;
    const auto r = run_iterative<T>(base.weights, pos, neg, d.train, f.cfg, d.eval, io);
    save_checkpoint(fs::path(f.out) / "final", to_checkpoint(r.final_model, Role::finetuned, f.cfg.rounds - 1, c.seed));
    write_text_file(fs::path(f.out) / "history.csv", history_csv(r.history));
    json rounds = json::array();
    for (const auto& s : r.rounds) {
        rounds.push_back({{"round", s.round},
                          {"best_mc1", s.best_mc1},
                          {"best_step", s.best_step},
                          {"best_so_far", s.best_so_far},
                          {"checkpoint", round_dir_name(s.round, s.best_step)}});
    }
    const auto& last = r.rounds.back();
    write_result(f.out, {{"best", round_dir_name(last.round, last.best_step)}, {"final", "final"}, {"rounds", rounds},
                         {"negative_fingerprint_start", r.negative_fingerprint_start},
                         {"negative_fingerprint_end", r.negative_fingerprint_end}});
    man.results() = {{"rounds", rounds}, {"history", history_json(r.history)}};
    man.finish();
    for (const auto& s : r.rounds) {
        std::cout << "round " << s.round << " best_mc1=" << fmt_real(s.best_mc1) << " best_so_far=" << fmt_real(s.best_so_far)
                  << "\n";
    }
    std::cout << "mc1=" << fmt_real(r.best_so_far.back()) << "\n";
    return 0;
}

template <typename T>
int cmd_sweep(const Common& c, TrainFlags f, const std::string& alphas_s, const std::string& betas_s) {
    f.cfg.kind = LossKind::pure_mg;
    finalize_train_cfg(c, f);
    if (f.positive.empty() || f.negative.empty()) throw ConfigError("sweep requires --positive and --negative");
    const auto alphas = parse_real_list(alphas_s, "--alphas");
    const auto betas = parse_real_list(betas_s, "--betas");
    for (const double v : alphas)
        if (v < 0) throw ConfigError("--alphas must be non-negative");
    for (const double v : betas)
        if (v < 0) throw ConfigError("--betas must be non-negative");
    RunManifest man(f.out, "sweep",
                    {{"train", train_config_json(f.cfg)}, {"alphas", alphas}, {"betas", betas}, {"precision", c.precision}},
                    c.seed);
    const Checkpoint<T> base = load_base<T>(f);
    const auto gp = load_guidance<T>(f.positive, base.config(), "positive guidance").merged();
    const auto gn = load_guidance<T>(f.negative, base.config(), "negative guidance").merged();
    const Data d = load_data(f.data, static_cast<std::size_t>(base.config().max_seq), true, true);
    man.input("base", resolve_checkpoint(f.base));
    man.input("positive", resolve_checkpoint(f.positive));
    man.input("negative", resolve_checkpoint(f.negative));
    man.input("data", f.data);
    man.write();
    const auto entries = sweep_pure_mg<T>(base.weights, GuidanceSet<T>{&gp, &gn, 0}, d.train, alphas, betas, f.cfg, d.eval,
                                         fs::path(f.out), make_log(c));
    std::ostringstream os;
    os << "alpha,beta,final_mc1,best_mc1,best_step,history_file\n";
    json res = json::array();
    for (const auto& e : entries) {
        os << fmt_real(e.alpha) << "," << fmt_real(e.beta) << "," << fmt_real(e.summary.history.back().mc1) << ","
           << fmt_real(e.summary.best_mc1) << "," << e.summary.best_step << "," << sweep_file_name(e.alpha, e.beta) << "\n";
        res.push_back({{"alpha", e.alpha}, {"beta", e.beta}, {"final_mc1", e.summary.history.back().mc1},
                       {"best_mc1", e.summary.best_mc1}});
    }
    write_text_file(fs::path(f.out) / "sweep_summary.csv", os.str());
    man.results() = res;
    man.finish();
    std::cout << "runs=" << entries.size() << "\n";
    return 0;
}

struct EvalFlags {
    std::string checkpoint, data, out;
    bool per_token = false;
    std::size_t n = 500, bins = 30;
    std::string prompt;
    std::size_t max_new = 24;
};

template <typename T>
Checkpoint<T> load_for_eval(const std::string& path) {
    return load_checkpoint<T>(resolve_checkpoint(path));
}

template <typename T>
int cmd_eval(const Common&, const EvalFlags& f) {
    const Checkpoint<T> ck = load_for_eval<T>(f.checkpoint);
    const Data d = load_data(f.data, static_cast<std::size_t>(ck.config().max_seq), false, true);
    const EvalReport r = mc1_score<T>(ck.weights, ck.adapter ? &*ck.adapter : nullptr, d.eval, Mc1Options{f.per_token});
    write_text_file(f.out, eval_report_csv(r));
    if (r.n_skipped) std::cerr << "warning: " << r.n_skipped << " item(s) skipped for exceeding max_seq\n";
    std::cout << "items=" << r.n_items << " skipped=" << r.n_skipped << "\n";
    std::cout << "mc1=" << fmt_real(r.mc1) << "\n";
    return 0;
}

template <typename T>
int cmd_stats(const Common& c, const EvalFlags& f) {
    const Checkpoint<T> ck = load_for_eval<T>(f.checkpoint);
    const Data d = load_data(f.data, static_cast<std::size_t>(ck.config().max_seq), true, false);
    const DistanceStats s =
        distance_stats<T>(ck.weights, ck.adapter ? &*ck.adapter : nullptr, d.train, f.n, c.seed, f.bins);
    write_text_file(f.out, distance_stats_csv(s));
    if (s.degenerate) std::cerr << "warning: degenerate histograms (all mass in one bin); KL reported as 0\n";
    std::cout << "mean_plus=" << fmt_real(s.mean_plus) << " std_plus=" << fmt_real(s.std_plus)
              << " mean_minus=" << fmt_real(s.mean_minus) << " std_minus=" << fmt_real(s.std_minus) << "\n";
    std::cout << "kl_pn=" << fmt_real(s.kl_pn) << " kl_np=" << fmt_real(s.kl_np) << "\n";
    return 0;
}

template <typename T>
int cmd_generate(const Common&, const EvalFlags& f) {
    const Checkpoint<T> ck = load_for_eval<T>(f.checkpoint);
    std::string prompt = f.prompt;
    if (prompt.empty()) throw ConfigError("--prompt must be non-empty");
    if (prompt.back() != '\n') prompt.push_back('\n');
    const auto toks = encode(prompt);
    const auto max_new = std::min<std::size_t>(
        f.max_new, static_cast<std::size_t>(ck.config().max_seq) > toks.size() ? ck.config().max_seq - toks.size() : 0);
    const auto out = greedy_generate<T>(ck.weights, ck.adapter ? &*ck.adapter : nullptr, toks, max_new);
    std::cout << prompt << decode(out) << "\n";
    return 0;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const CheckpointError*>(&e) ||
        dynamic_cast<const ShapeError*>(&e))
        return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Representation-editing contrastive training on a toy transformer"};
    app.set_version_flag("--version", std::string(REPSTEER_VERSION));
    app.set_config("--config", "", "TOML/INI file supplying any flag; command-line values win");
    app.require_subcommand(1);
    Common common;
    app.add_option("--seed", common.seed, "Run seed; every random stream derives from it")->capture_default_str();
    app.add_option("--precision", common.precision, "Scalar type for training and evaluation")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app.add_flag("-q,--quiet", common.quiet, "Suppress progress output on stderr");

    CorpusFlags corpus;
    auto* c_corpus = app.add_subcommand("corpus", "Generate the synthetic fact world, training triples and MC1 items");
    c_corpus->add_option("--entities", corpus.entities, "Number of entities (>= 4)")->capture_default_str();
    c_corpus->add_option("--attributes", corpus.attributes, "Number of attributes (2..12)")->capture_default_str();
    c_corpus->add_option("--train-frac", corpus.train_frac, "Fraction of facts used for training")->capture_default_str();
    c_corpus->add_option("--eval-frac", corpus.eval_frac, "Fraction of facts used for MC1 items")->capture_default_str();
    c_corpus->add_option("--pos-template", corpus.templates.positive, "Positive template")->capture_default_str();
    c_corpus->add_option("--neg-template", corpus.templates.negative, "Negative template")->capture_default_str();
    c_corpus->add_option("--out", corpus.out, "Output directory")->required();

    BaseFlags base;
    auto* c_base = app.add_subcommand("pretrain-base", "Next-token pretraining of the foundation model");
    c_base->add_option("--data", base.data, "Corpus directory (world.json)")->required();
    c_base->add_option("--out", base.out, "Checkpoint directory")->required();
    c_base->add_option("--steps", base.cfg.steps, "Optimizer steps")->capture_default_str();
    c_base->add_option("--batch", base.cfg.batch_size, "Batch size")->capture_default_str();
    c_base->add_option("--lr", base.cfg.learning_rate, "Learning rate")->capture_default_str();
    c_base->add_option("--d-model", base.model.d_model, "Model width")->capture_default_str();
    c_base->add_option("--n-layers", base.model.n_layers, "Number of blocks")->capture_default_str();
    c_base->add_option("--heads", base.model.n_heads, "Attention heads")->capture_default_str();
    c_base->add_option("--d-ff", base.model.d_ff, "MLP width")->capture_default_str();
    c_base->add_option("--max-seq", base.model.max_seq, "Maximum sequence length")->capture_default_str();
    c_base->add_option("--layers", base.layers, "Target layers, comma separated")->capture_default_str();

    TrainFlags guid;
    std::string role = "positive";
    auto* c_guid = app.add_subcommand("pretrain-guidance", "Train the positive or negative guidance adapter");
    c_guid->add_option("--role", role, "positive (cl_ct, a=10 b=1) or negative (gmp_negative, a=1 b=10)")
        ->check(CLI::IsMember({"positive", "negative"}))
        ->capture_default_str();
    add_train_flags(c_guid, guid, false, false);

    TrainFlags train;
    train.kind = "cl_mg";
    auto* c_train = app.add_subcommand("train", "One training round of any loss kind");
    add_train_flags(c_train, train, true, true);
    c_train->add_option("--positive", train.positive, "Positive guidance checkpoint or run directory");
    c_train->add_option("--negative", train.negative, "Negative guidance checkpoint or run directory");

    TrainFlags iter;
    auto* c_iter = app.add_subcommand("iter", "Iterative training with best-model promotion of the positive guide");
    add_train_flags(c_iter, iter, true, true);
    c_iter->add_option("--rounds", iter.cfg.rounds, "Number of rounds N")->capture_default_str();
    c_iter->add_option("--positive", iter.positive, "Initial positive guidance checkpoint")->required();
    c_iter->add_option("--negative", iter.negative, "Negative guidance checkpoint (never updated)")->required();

    TrainFlags sweep;
    std::string alphas = "1,10,100", betas = "1,5,10,100";
    auto* c_sweep = app.add_subcommand("sweep", "Pure-MG runs over an alpha x beta grid");
    add_train_flags(c_sweep, sweep, false, false);
    c_sweep->add_option("--alphas", alphas, "Comma-separated alpha grid")->capture_default_str();
    c_sweep->add_option("--betas", betas, "Comma-separated beta grid")->capture_default_str();
    c_sweep->add_option("--positive", sweep.positive, "Positive guidance checkpoint")->required();
    c_sweep->add_option("--negative", sweep.negative, "Negative guidance checkpoint")->required();

    EvalFlags ev;
    auto* c_eval = app.add_subcommand("eval", "MC1 accuracy on eval.jsonl");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint or run directory")->required();
    c_eval->add_option("--data", ev.data, "Corpus directory")->required();
    c_eval->add_option("--out", ev.out, "CSV report path")->required();
    c_eval->add_flag("--per-token", ev.per_token, "Length-normalize choice log-probs");

    EvalFlags st;
    auto* c_stats = app.add_subcommand("stats", "Distance statistics and KL divergence over sampled triples");
    c_stats->add_option("--checkpoint", st.checkpoint, "Checkpoint or run directory (typically the base)")->required();
    c_stats->add_option("--data", st.data, "Corpus directory")->required();
    c_stats->add_option("--out", st.out, "CSV report path")->required();
    c_stats->add_option("--n", st.n, "Triples to sample")->capture_default_str();
    c_stats->add_option("--bins", st.bins, "Histogram bins")->capture_default_str();

    EvalFlags gen;
    auto* c_gen = app.add_subcommand("generate", "Greedy continuation of a prompt");
    c_gen->add_option("--checkpoint", gen.checkpoint, "Checkpoint or run directory")->required();
    c_gen->add_option("--prompt", gen.prompt, "Prompt text, e.g. \"Q: Bax's color?\"")->required();
    c_gen->add_option("--max-new", gen.max_new, "Maximum new tokens")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const bool f64 = common.precision == "f64";
    try {
        if (*c_corpus) return cmd_corpus(common, corpus);
        if (*c_base) return f64 ? cmd_pretrain_base<double>(common, base) : cmd_pretrain_base<float>(common, base);
        if (*c_guid) return f64 ? cmd_pretrain_guidance<double>(common, guid, role) : cmd_pretrain_guidance<float>(common, guid, role);
        if (*c_train) return f64 ? cmd_train<double>(common, train) : cmd_train<float>(common, train);
        if (*c_iter) return f64 ? cmd_iter<double>(common, iter) : cmd_iter<float>(common, iter);
        if (*c_sweep) return f64 ? cmd_sweep<double>(common, sweep, alphas, betas) : cmd_sweep<float>(common, sweep, alphas, betas);
        if (*c_eval) return f64 ? cmd_eval<double>(common, ev) : cmd_eval<float>(common, ev);
        if (*c_stats) return f64 ? cmd_stats<double>(common, st) : cmd_stats<float>(common, st);
        if (*c_gen) return f64 ? cmd_generate<double>(common, gen) : cmd_generate<float>(common, gen);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 1;
}
