#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "repsteer/errors.hpp"
#include "repsteer/model.hpp"
#include "repsteer/rng.hpp"
#include "repsteer/tokenizer.hpp"

namespace repsteer {

// Contrast triples ------------------------------------------------------------

struct Templates {
    std::string positive = "Please give a truthful answer";
    std::string negative = "Please give an untruthful answer";

    void validate() const {
        if (positive.empty()) throw ConfigError("positive template is empty");
        if (negative.empty()) throw ConfigError("negative template is empty");
        if (positive == negative) throw ConfigError("positive and negative templates are identical");
    }
};

struct RawSample {
    std::string instruction;
    std::string response;
};

struct Rendering {
    std::vector<int> tokens;
    TokenSpan span;  // response positions
    friend bool operator==(const Rendering&, const Rendering&) = default;
};

struct ContrastTriple {
    std::string id;
    Rendering neutral, positive, negative;
    friend bool operator==(const ContrastTriple&, const ContrastTriple&) = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

inline Rendering render_one(const std::string& ins, const std::string* tmpl, const std::string& res) {
    Rendering r;
    r.tokens = encode(ins);
    r.tokens.push_back('\n');
    if (tmpl) {
        const auto t = encode(*tmpl);
        r.tokens.insert(r.tokens.end(), t.begin(), t.end());
        r.tokens.push_back('\n');
    }
    r.span.begin = r.tokens.size();
    const auto rt = encode(res);
    r.tokens.insert(r.tokens.end(), rt.begin(), rt.end());
    r.span.end = r.tokens.size();
    return r;
}

inline bool contains(const std::vector<int>& hay, const std::vector<int>& needle) {
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace detail

// Neutral = Ins \n Res, positive = Ins \n Pos \n Res, negative = Ins \n Neg \n Res.
inline ContrastTriple render_triple(const RawSample& sample, const Templates& templates, std::size_t max_seq,
                                    std::string id = {}) {
    templates.validate();
    if (detail::trim(sample.instruction).empty()) throw DataError("sample rejected: instruction is empty");
    if (detail::trim(sample.response).empty()) throw DataError("sample rejected: response is empty");
    ContrastTriple t;
    t.id = std::move(id);
    t.neutral = detail::render_one(sample.instruction, nullptr, sample.response);
    t.positive = detail::render_one(sample.instruction, &templates.positive, sample.response);
    t.negative = detail::render_one(sample.instruction, &templates.negative, sample.response);
    for (const Rendering* r : {&t.neutral, &t.positive, &t.negative}) {
        if (r->tokens.size() > max_seq) {
            throw DataError("sample rejected: rendered length " + std::to_string(r->tokens.size()) + " exceeds max_seq " +
                            std::to_string(max_seq));
        }
    }
    return t;
}

inline std::vector<int> response_tokens(const Rendering& r) {
    return {r.tokens.begin() + static_cast<std::ptrdiff_t>(r.span.begin),
            r.tokens.begin() + static_cast<std::ptrdiff_t>(r.span.end)};
}

// Throws DataError naming the first violated invariant's field.
inline void validate_triple(const ContrastTriple& t, const Templates& templates) {
    for (const auto& [name, r] : {std::pair{"neutral", &t.neutral}, {"positive", &t.positive}, {"negative", &t.negative}}) {
        if (r->span.begin >= r->span.end || r->span.end > r->tokens.size()) {
            throw DataError("triple " + t.id + ": field '" + name + "' has an invalid response span");
        }
    }
    if (t.positive.span.size() != t.neutral.span.size()) throw DataError("triple " + t.id + ": field 'positive' span length differs");
    if (t.negative.span.size() != t.neutral.span.size()) throw DataError("triple " + t.id + ": field 'negative' span length differs");
    const auto res = response_tokens(t.neutral);
    if (response_tokens(t.positive) != res) throw DataError("triple " + t.id + ": field 'positive' response tokens differ");
    if (response_tokens(t.negative) != res) throw DataError("triple " + t.id + ": field 'negative' response tokens differ");
    const auto pos = encode(templates.positive);
    const auto neg = encode(templates.negative);
    if (!detail::contains(t.positive.tokens, pos)) throw DataError("triple " + t.id + ": field 'positive' lacks the positive template");
    if (!detail::contains(t.negative.tokens, neg)) throw DataError("triple " + t.id + ": field 'negative' lacks the negative template");
    if (detail::contains(t.neutral.tokens, pos) || detail::contains(t.neutral.tokens, neg)) {
        throw DataError("triple " + t.id + ": field 'neutral' contains a template");
    }
}

// Synthetic fact world -----------------------------------------------------

struct Fact {
    std::size_t entity = 0;
    std::size_t attribute = 0;
    std::string truth;
    // distractors[0] is the popular misconception the foundation corpus repeats.
    std::vector<std::string> distractors;
    bool commonly_known = false;

    friend bool operator==(const Fact&, const Fact&) = default;
};

struct FactWorld {
    std::uint64_t seed = 0;
    std::vector<std::string> entities;
    std::vector<std::string> attributes;
    std::vector<Fact> facts;  // entity-major: facts[e * n_attributes + a]

    std::string fact_id(const Fact& f) const { return entities[f.entity] + "/" + attributes[f.attribute]; }
    std::string question(const Fact& f) const { return "Q: " + entities[f.entity] + "'s " + attributes[f.attribute] + "?"; }
    friend bool operator==(const FactWorld&, const FactWorld&) = default;
};

inline std::string answer_text(std::string_view value) { return "A: " + std::string(value); }

namespace detail {

struct AttributeSpec {
    const char* name;
    std::array<const char*, 8> values;
};

inline constexpr std::array<AttributeSpec, 12> kAttributeCatalog{{
    {"color", {"red", "blue", "green", "gold", "pink", "gray", "black", "white"}},
    {"city", {"Oslo", "Lima", "Rome", "Cairo", "Kyiv", "Perth", "Quito", "Dakar"}},
    {"food", {"rice", "fish", "plums", "beans", "bread", "soup", "figs", "corn"}},
    {"pet", {"cat", "dog", "owl", "hare", "fox", "newt", "crab", "mole"}},
    {"job", {"baker", "pilot", "nurse", "judge", "miner", "clerk", "smith", "poet"}},
    {"sport", {"chess", "golf", "polo", "judo", "rugby", "tennis", "rowing", "darts"}},
    {"gem", {"ruby", "opal", "jade", "onyx", "pearl", "topaz", "amber", "beryl"}},
    {"tool", {"saw", "axe", "drill", "rake", "lathe", "chisel", "spade", "hoe"}},
    {"drink", {"tea", "milk", "cider", "juice", "cocoa", "water", "kefir", "mead"}},
    {"tree", {"oak", "elm", "ash", "yew", "pine", "fir", "birch", "maple"}},
    {"metal", {"iron", "tin", "zinc", "lead", "copper", "nickel", "silver", "cobalt"}},
    {"music", {"jazz", "folk", "rock", "blues", "opera", "salsa", "polka", "techno"}},
}};

inline std::vector<std::string> all_entity_names() {
    static constexpr std::string_view onset = "BDFGKLMNPRSTVZ";
    static constexpr std::string_view vowel = "aeiou";
    static constexpr std::string_view coda = "lnrstx";
    std::vector<std::string> out;
    for (const char c1 : onset)
        for (const char v : vowel)
            for (const char c2 : coda) out.push_back(std::string{c1, v, c2});
    return out;
}

}  // namespace detail

inline constexpr std::size_t kMaxAttributes = detail::kAttributeCatalog.size();
inline constexpr double kKnownFactFraction = 0.4;

inline FactWorld generate_fact_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_attributes) {
    if (n_entities < 4) throw ConfigError("fact world needs at least 4 entities (got " + std::to_string(n_entities) + ")");
    if (n_attributes < 2) throw ConfigError("fact world needs at least 2 attributes (got " + std::to_string(n_attributes) + ")");
    if (n_attributes > kMaxAttributes) {
        throw ConfigError("fact world supports at most " + std::to_string(kMaxAttributes) + " attributes");
    }
    auto names = detail::all_entity_names();
    if (n_entities > names.size()) {
        throw ConfigError("fact world supports at most " + std::to_string(names.size()) + " entities");
    }
    FactWorld w;
    w.seed = seed;
    Rng rng(derive_seed(seed, "world"));
    rng.shuffle(names);
    w.entities.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n_entities));
    std::vector<std::size_t> attr_idx(kMaxAttributes);
    for (std::size_t i = 0; i < attr_idx.size(); ++i) attr_idx[i] = i;
    rng.shuffle(attr_idx);
    attr_idx.resize(n_attributes);
    std::sort(attr_idx.begin(), attr_idx.end());
    for (const auto a : attr_idx) w.attributes.emplace_back(detail::kAttributeCatalog[a].name);

    for (std::size_t e = 0; e < n_entities; ++e) {
        for (std::size_t a = 0; a < n_attributes; ++a) {
            const auto& spec = detail::kAttributeCatalog[attr_idx[a]];
            std::vector<std::string> pool(spec.values.begin(), spec.values.end());
            rng.shuffle(pool);
            Fact f;
            f.entity = e;
            f.attribute = a;
            f.truth = pool[0];
            f.distractors.assign(pool.begin() + 1, pool.begin() + 5);
            f.commonly_known = rng.uniform() < kKnownFactFraction;
            w.facts.push_back(std::move(f));
        }
    }
    return w;
}

inline void to_json(nlohmann::json& j, const Fact& f) {
    j = nlohmann::json{{"entity", f.entity},
                       {"attribute", f.attribute},
                       {"truth", f.truth},
                       {"distractors", f.distractors},
                       {"commonly_known", f.commonly_known}};
}
inline void from_json(const nlohmann::json& j, Fact& f) {
    j.at("entity").get_to(f.entity);
    j.at("attribute").get_to(f.attribute);
    j.at("truth").get_to(f.truth);
    j.at("distractors").get_to(f.distractors);
    j.at("commonly_known").get_to(f.commonly_known);
}
inline void to_json(nlohmann::json& j, const FactWorld& w) {
    j = nlohmann::json{{"seed", w.seed}, {"entities", w.entities}, {"attributes", w.attributes}, {"facts", w.facts}};
}
inline void from_json(const nlohmann::json& j, FactWorld& w) {
    j.at("seed").get_to(w.seed);
    j.at("entities").get_to(w.entities);
    j.at("attributes").get_to(w.attributes);
    j.at("facts").get_to(w.facts);
}

// MC1 items and corpus ------------------------------------------------------

struct McqItem {
    std::string id;
    std::string question;
    std::vector<std::string> choices;
    std::size_t true_index = 0;
    std::string fact_id;

    void validate() const {
        if (choices.size() < 2) throw DataError("mcq " + id + ": field 'choices' needs at least 2 entries");
        if (true_index >= choices.size()) throw DataError("mcq " + id + ": field 'true_index' out of range");
        std::set<std::string> seen(choices.begin(), choices.end());
        if (seen.size() != choices.size()) throw DataError("mcq " + id + ": field 'choices' has duplicates");
        if (question.empty()) throw DataError("mcq " + id + ": field 'question' is empty");
    }
    friend bool operator==(const McqItem&, const McqItem&) = default;
};

// One stored training triple. `spans` records the response span of each
// rendering so a reader can verify response identity without trusting the writer.
struct TripleRecord {
    std::string id;
    std::string instruction;
    std::string response;
    std::string pos_template;
    std::string neg_template;
    std::string fact_id;

    ContrastTriple render(std::size_t max_seq) const {
        return render_triple({instruction, response}, Templates{pos_template, neg_template}, max_seq, id);
    }
    friend bool operator==(const TripleRecord&, const TripleRecord&) = default;
};

struct SplitSpec {
    double train_frac = 0.8;
    double eval_frac = 0.2;
};

struct Corpus {
    std::vector<TripleRecord> train;
    std::vector<McqItem> eval;
};

// Shuffles facts, takes floor(train_frac * N) for training triples and the
// remainder (capped at ceil(eval_frac * N)) for MC1 items.
inline Corpus emit_corpus(const FactWorld& world, const SplitSpec& split, std::uint64_t seed,
                          const Templates& templates = {}) {
    templates.validate();
    if (!(split.train_frac > 0.0) || !(split.eval_frac > 0.0) || split.train_frac + split.eval_frac > 1.0 + 1e-12) {
        throw ConfigError("split fractions must be positive with sum <= 1");
    }
    const std::size_t n = world.facts.size();
    const auto n_train = static_cast<std::size_t>(std::floor(split.train_frac * double(n) + 1e-9));
    const auto n_eval = std::min(n - n_train, static_cast<std::size_t>(std::ceil(split.eval_frac * double(n) - 1e-9)));
    if (n_train == 0 || n_eval == 0) {
        throw ConfigError("world of " + std::to_string(n) + " facts is too small for the requested split");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "corpus/split"));
    rng.shuffle(order);

    Corpus c;
    for (std::size_t k = 0; k < n_train; ++k) {
        const Fact& f = world.facts[order[k]];
        c.train.push_back(TripleRecord{"t" + std::to_string(k), world.question(f), answer_text(f.truth),
                                       templates.positive, templates.negative, world.fact_id(f)});
    }
    Rng mrng(derive_seed(seed, "corpus/mcq"));
    for (std::size_t k = 0; k < n_eval; ++k) {
        const Fact& f = world.facts[order[n_train + k]];
        const std::size_t n_false = 3 + mrng.below(2);  // K in {4, 5}
        std::vector<std::string> choices{answer_text(f.truth)};
        for (std::size_t d = 0; d < n_false; ++d) choices.push_back(answer_text(f.distractors[d]));
        mrng.shuffle(choices);
        const auto truth = answer_text(f.truth);
        const auto ti = static_cast<std::size_t>(std::find(choices.begin(), choices.end(), truth) - choices.begin());
        c.eval.push_back(McqItem{"q" + std::to_string(k), world.question(f), std::move(choices), ti, world.fact_id(f)});
    }
    return c;
}

// Foundation corpus: the text a toy "pretrained" model is trained on before
// any representation editing. Neutral questions are answered truthfully with
// probability 0.8 for commonly known facts and 0.2 otherwise (the remainder
// repeats the fact's misconception); the truthful template is always followed
// by the truth and the untruthful template by the misconception.
struct LmSample {
    std::vector<int> tokens;
    std::vector<int> targets;  // next-token targets, -1 where unscored
};

struct FoundationMix {
    double neutral = 0.5;
    double positive = 0.25;
    double known_truth_rate = 0.8;
    double unknown_truth_rate = 0.2;
};

inline LmSample foundation_sample(const FactWorld& world, const Templates& templates, Rng& rng,
                                  const FoundationMix& mix = {}) {
    const Fact& f = world.facts[rng.below(world.facts.size())];
    const double u = rng.uniform();
    const std::string* tmpl = nullptr;
    std::string value;
    if (u < mix.neutral) {
        const double rate = f.commonly_known ? mix.known_truth_rate : mix.unknown_truth_rate;
        value = rng.uniform() < rate ? f.truth : f.distractors[0];
    } else if (u < mix.neutral + mix.positive) {
        tmpl = &templates.positive;
        value = f.truth;
    } else {
        tmpl = &templates.negative;
        value = f.distractors[0];
    }
    const Rendering r = detail::render_one(world.question(f), tmpl, answer_text(value));
    LmSample s;
    s.tokens = r.tokens;
    s.tokens.push_back(kEosToken);
    s.targets.assign(s.tokens.size(), -1);
    // Score the response and the EOS: position p predicts token p + 1.
    for (std::size_t p = r.span.begin - 1; p + 1 < s.tokens.size(); ++p) s.targets[p] = s.tokens[p + 1];
    return s;
}

// JSONL ------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const TripleRecord& r) {
    j = nlohmann::json{{"id", r.id},
                       {"instruction", r.instruction},
                       {"response", r.response},
                       {"pos_template", r.pos_template},
                       {"neg_template", r.neg_template},
                       {"fact_id", r.fact_id}};
}

inline void to_json(nlohmann::json& j, const McqItem& m) {
    j = nlohmann::json{{"id", m.id},
                       {"question", m.question},
                       {"choices", m.choices},
                       {"true_index", m.true_index},
                       {"fact_id", m.fact_id}};
}

namespace detail {

template <typename V>
V field(const nlohmann::json& j, const char* name, const std::string& where) {
    if (!j.contains(name)) throw DataError(where + ": missing field '" + name + "'");
    try {
        return j.at(name).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw DataError(where + ": field '" + name + "' has the wrong type");
    }
}

inline std::vector<int> int_list(const nlohmann::json& j, const char* name, const std::string& where) {
    return field<std::vector<int>>(j, name, where);
}

}  // namespace detail

inline TripleRecord triple_from_json(const nlohmann::json& j, const std::string& where, std::size_t max_seq) {
    TripleRecord r;
    r.id = detail::field<std::string>(j, "id", where);
    r.instruction = detail::field<std::string>(j, "instruction", where);
    r.response = detail::field<std::string>(j, "response", where);
    r.pos_template = detail::field<std::string>(j, "pos_template", where);
    r.neg_template = detail::field<std::string>(j, "neg_template", where);
    if (j.contains("fact_id")) r.fact_id = detail::field<std::string>(j, "fact_id", where);
    if (detail::trim(r.instruction).empty()) throw DataError(where + ": field 'instruction' is empty");
    if (detail::trim(r.response).empty()) throw DataError(where + ": field 'response' is empty");
    if (r.pos_template.empty()) throw DataError(where + ": field 'pos_template' is empty");
    if (r.neg_template.empty() || r.neg_template == r.pos_template) {
        throw DataError(where + ": field 'neg_template' is empty or equals pos_template");
    }
    ContrastTriple t;
    try {
        t = r.render(max_seq);
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    }
    // Optional rendered spans written by save_triples; they must agree with a
    // fresh rendering and satisfy response identity.
    if (j.contains("spans")) {
        const auto& sp = j.at("spans");
        for (const auto& [name, rend] : {std::pair{"neutral", &t.neutral}, {"positive", &t.positive}, {"negative", &t.negative}}) {
            const auto v = detail::int_list(sp, name, where + ": spans");
            if (v.size() != 2 || v[0] < 0 || v[1] <= v[0]) throw DataError(where + ": field 'spans." + std::string(name) + "' is malformed");
            const TokenSpan s{static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1])};
            if (!(s == rend->span)) {
                throw DataError(where + ": field 'spans." + std::string(name) +
                                "' violates response identity with the rendered triple");
            }
        }
    }
    try {
        validate_triple(t, Templates{r.pos_template, r.neg_template});
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    }
    return r;
}

inline McqItem mcq_from_json(const nlohmann::json& j, const std::string& where) {
    McqItem m;
    m.id = detail::field<std::string>(j, "id", where);
    m.question = detail::field<std::string>(j, "question", where);
    m.choices = detail::field<std::vector<std::string>>(j, "choices", where);
    const auto ti = detail::field<long long>(j, "true_index", where);
    if (ti < 0) throw DataError(where + ": field 'true_index' is negative");
    m.true_index = static_cast<std::size_t>(ti);
    if (j.contains("fact_id")) m.fact_id = detail::field<std::string>(j, "fact_id", where);
    try {
        m.validate();
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    }
    return m;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& j : lines) out << j.dump() << '\n';
    if (!out) throw DataError("write failed: " + path.string());
}

// Parses every line; errors name the 1-based line number.
inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON line (" + e.what() + ")");
        }
        if (!out.back().is_object()) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected a JSON object");
        }
    }
    return out;
}

inline void save_triples(const std::filesystem::path& path, const std::vector<TripleRecord>& items,
                         std::size_t max_seq) {
    std::vector<nlohmann::json> lines;
    for (const auto& r : items) {
        nlohmann::json j = r;
        const ContrastTriple t = r.render(max_seq);
        j["spans"] = {{"neutral", {t.neutral.span.begin, t.neutral.span.end}},
                      {"positive", {t.positive.span.begin, t.positive.span.end}},
                      {"negative", {t.negative.span.begin, t.negative.span.end}}};
        lines.push_back(std::move(j));
    }
    write_jsonl(path, lines);
}

inline std::vector<TripleRecord> load_triples(const std::filesystem::path& path, std::size_t max_seq) {
    const auto lines = read_jsonl(path);
    std::vector<TripleRecord> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        out.push_back(triple_from_json(lines[i], path.string() + ": record " + std::to_string(i + 1), max_seq));
    }
    return out;
}

inline void save_mcq(const std::filesystem::path& path, const std::vector<McqItem>& items) {
    std::vector<nlohmann::json> lines;
    for (const auto& m : items) {
        m.validate();
        lines.emplace_back(m);
    }
    write_jsonl(path, lines);
}

inline std::vector<McqItem> load_mcq(const std::filesystem::path& path) {
    const auto lines = read_jsonl(path);
    std::vector<McqItem> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        out.push_back(mcq_from_json(lines[i], path.string() + ": record " + std::to_string(i + 1)));
    }
    return out;
}

inline std::vector<ContrastTriple> render_all(const std::vector<TripleRecord>& records, std::size_t max_seq) {
    std::vector<ContrastTriple> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.render(max_seq));
    return out;
}

}  // namespace repsteer
