#include "advbt/textprep.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "advbt/emoji_table_data.hpp"
#include "advbt/error.hpp"
#include "advbt/rng.hpp"

namespace advbt {

RawLabel parse_label(std::string_view name) {
    if (name == "health") return RawLabel::health;
    if (name == "non-health") return RawLabel::non_health;
    if (name == "figurative") return RawLabel::figurative;
    throw Error("unknown-label", "unknown label '" + std::string(name) + "'");
}

std::string_view label_name(RawLabel label) {
    switch (label) {
        case RawLabel::health: return "health";
        case RawLabel::non_health: return "non-health";
        case RawLabel::figurative: return "figurative";
    }
    return "health";
}

int merge_labels(RawLabel label) { return label == RawLabel::health ? 1 : 0; }
int merge_labels(const RawExample& example) { return merge_labels(example.label); }

// ---------------------------------------------------------------------------
// Emoji

namespace {

void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

}  // namespace

EmojiTable EmojiTable::from_tsv(std::istream& in) {
    EmojiTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw Error("emoji-table-parse-error", "emoji table line " + std::to_string(lineno) +
                                                       ": missing tab");
        }
        std::string key;
        std::istringstream codes(line.substr(0, tab));
        std::string hex;
        while (codes >> hex) append_utf8(key, static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16)));
        if (key.empty()) continue;
        table.max_key_bytes_ = std::max(table.max_key_bytes_, key.size());
        table.entries_[key] = line.substr(tab + 1);
    }
    return table;
}

EmojiTable EmojiTable::from_tsv_text(std::string_view text) {
    std::istringstream in{std::string(text)};
    return from_tsv(in);
}

const EmojiTable& EmojiTable::builtin() {
    static const EmojiTable table = from_tsv_text(detail::kEmojiTsv);
    return table;
}

std::size_t EmojiTable::match(std::string_view text, std::size_t pos, std::string_view* name) const {
    const std::size_t longest = std::min(max_key_bytes_, text.size() - pos);
    for (std::size_t len = longest; len > 0; --len) {
        auto it = entries_.find(std::string(text.substr(pos, len)));
        if (it != entries_.end()) {
            if (name) *name = it->second;
            return len;
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Preprocessing

std::string preprocess(std::string_view text, const PreprocessOptions& options,
                       const EmojiTable& emoji) {
    static const std::regex url(R"((https?://\S*)|(www\.\S*)|(\bt\.co/\S*))",
                                std::regex::ECMAScript | std::regex::icase);
    static const std::regex mention(R"(@\w+)");
    static const std::regex hashtag(R"(#(\w+))");

    std::string s;
    s.reserve(text.size());
    for (std::size_t i = 0; i < text.size();) {
        std::string_view name;
        // Every bundled emoji starts with a lead byte >= 0xE2.
        if (static_cast<unsigned char>(text[i]) >= 0xE2) {
            if (std::size_t len = emoji.match(text, i, &name); len > 0) {
                s += ' ';
                s += name;
                s += ' ';
                i += len;
                continue;
            }
        }
        s += text[i++];
    }

    s = std::regex_replace(s, url, "");
    s = std::regex_replace(s, mention, "");
    s = std::regex_replace(s, hashtag, options.strict_hashtags ? "" : "$1");

    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
            pending_space = true;
            continue;
        }
        const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                          (c >= '0' && c <= '9') || c == '\'';
        if (!keep) continue;
        if (pending_space && !out.empty()) out += ' ';
        pending_space = false;
        out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
    }
    return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) tokens.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary and encoding

Vocab::Vocab() : tokens_{"[PAD]", "[CLS]", "[UNK]"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    if (tokens.size() < 3 || tokens[0] != "[PAD]" || tokens[1] != "[CLS]" || tokens[2] != "[UNK]") {
        throw Error("invalid-vocab", "vocabulary must start with [PAD], [CLS], [UNK]");
    }
    for (std::size_t i = 3; i < tokens.size(); ++i) {
        if (!v.index_.emplace(tokens[i], static_cast<int>(i)).second) {
            throw Error("invalid-vocab", "duplicate vocabulary token '" + tokens[i] + "'");
        }
    }
    v.tokens_ = std::move(tokens);
    return v;
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts) {
        for (auto& tok : split_whitespace(t)) ++counts[std::move(tok)];
    }
    std::vector<std::string> tokens{"[PAD]", "[CLS]", "[UNK]"};
    for (const auto& [tok, count] : counts) {
        if (count >= min_count && tok != "[PAD]" && tok != "[CLS]" && tok != "[UNK]") {
            tokens.push_back(tok);
        }
    }
    return from_tokens(std::move(tokens));
}

int Vocab::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw Error("out-of-vocabulary", "token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::size_t EncodedExample::length() const {
    return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
}

EncodedExample tokenize_encode(std::string_view text, const Vocab& vocab, std::size_t max_seq_len,
                               int label) {
    if (max_seq_len < 1) throw Error("invalid-argument", "max_seq_len must be >= 1");
    EncodedExample ex;
    ex.label = label;
    ex.token_ids.assign(max_seq_len, kPadId);
    ex.attention_mask.assign(max_seq_len, 0);
    ex.token_ids[0] = kClsId;
    ex.attention_mask[0] = 1;
    std::size_t pos = 1;
    for (const auto& tok : split_whitespace(text)) {
        if (pos >= max_seq_len) break;
        ex.token_ids[pos] = vocab.id(tok);
        ex.attention_mask[pos] = 1;
        ++pos;
    }
    return ex;
}

std::vector<std::string> decode(const EncodedExample& example, const Vocab& vocab) {
    std::vector<std::string> out;
    for (std::size_t i = 1; i < example.token_ids.size() && example.attention_mask[i]; ++i) {
        out.push_back(vocab.token(example.token_ids[i]));
    }
    return out;
}

TokenBatch make_batch(std::span<const EncodedExample> examples,
                      std::span<const std::size_t> indices) {
    TokenBatch b;
    b.batch = indices.size();
    if (b.batch == 0) throw Error("invalid-argument", "make_batch: no examples selected");
    for (auto i : indices) b.seq = std::max(b.seq, examples[i].length());
    b.seq = std::max<std::size_t>(b.seq, 1);
    b.ids.reserve(b.batch * b.seq);
    b.mask.reserve(b.batch * b.seq);
    for (auto i : indices) {
        const auto& ex = examples[i];
        if (ex.token_ids.size() < b.seq) throw Error("shape-mismatch", "make_batch: short example");
        b.ids.insert(b.ids.end(), ex.token_ids.begin(), ex.token_ids.begin() + static_cast<std::ptrdiff_t>(b.seq));
        b.mask.insert(b.mask.end(), ex.attention_mask.begin(),
                      ex.attention_mask.begin() + static_cast<std::ptrdiff_t>(b.seq));
        b.labels.push_back(ex.label);
    }
    return b;
}

TokenBatch make_batch(std::span<const EncodedExample> examples) {
    std::vector<std::size_t> all(examples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return make_batch(examples, all);
}

// ---------------------------------------------------------------------------
// Corpus files

CorpusFormat corpus_format_for(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? CorpusFormat::csv : CorpusFormat::jsonl;
}

namespace {

[[noreturn]] void parse_fail(std::size_t lineno, const std::string& what) {
    throw Error("corpus-parse-error", "line " + std::to_string(lineno) + ": " + what);
}

RawExample make_example(std::string text, std::string_view label, std::size_t lineno) {
    RawExample ex;
    try {
        ex.label = parse_label(label);
    } catch (const Error&) {
        throw Error("unknown-label",
                    "line " + std::to_string(lineno) + ": unknown label '" + std::string(label) + "'");
    }
    if (text.empty()) parse_fail(lineno, "empty text");
    ex.text = std::move(text);
    return ex;
}

// RFC 4180 record reader; quoted fields may span lines.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields, std::size_t& lineno) {
    fields.clear();
    std::string line;
    if (!std::getline(in, line)) return false;
    ++lineno;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0;; ++i) {
        if (i == line.size()) {
            if (quoted) {
                if (!std::getline(in, line)) parse_fail(lineno, "unterminated quoted field");
                ++lineno;
                field += '\n';
                i = static_cast<std::size_t>(-1);
                continue;
            }
            break;
        }
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    fields.push_back(std::move(field));
    return true;
}

}  // namespace

std::vector<RawExample> parse_corpus(std::istream& in, CorpusFormat format) {
    std::vector<RawExample> out;
    std::size_t lineno = 0;
    if (format == CorpusFormat::jsonl) {
        std::string line;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                parse_fail(lineno, std::string("invalid JSON: ") + e.what());
            }
            if (!j.is_object()) parse_fail(lineno, "expected a JSON object");
            if (!j.contains("text") || !j["text"].is_string()) parse_fail(lineno, "missing text");
            if (!j.contains("label") || !j["label"].is_string()) parse_fail(lineno, "missing label");
            out.push_back(make_example(j["text"].get<std::string>(),
                                       j["label"].get<std::string>(), lineno));
        }
        return out;
    }
    std::vector<std::string> fields;
    std::size_t text_col = 0, label_col = 1;
    bool header = true;
    while (read_csv_record(in, fields, lineno)) {
        if (fields.size() == 1 && fields[0].empty()) continue;
        if (header) {
            header = false;
            auto t = std::find(fields.begin(), fields.end(), "text");
            auto l = std::find(fields.begin(), fields.end(), "label");
            if (t == fields.end() || l == fields.end()) {
                parse_fail(lineno, "CSV header must name 'text' and 'label' columns");
            }
            text_col = static_cast<std::size_t>(t - fields.begin());
            label_col = static_cast<std::size_t>(l - fields.begin());
            continue;
        }
        if (fields.size() <= std::max(text_col, label_col) || fields[label_col].empty()) {
            parse_fail(lineno, "missing label");
        }
        out.push_back(make_example(fields[text_col], fields[label_col], lineno));
    }
    return out;
}

std::vector<RawExample> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("corpus-not-found", "cannot open corpus " + path.string());
    return parse_corpus(in, format);
}

void write_corpus_jsonl(std::ostream& out, std::span<const RawExample> examples) {
    for (const auto& ex : examples) {
        nlohmann::ordered_json j;
        j["text"] = ex.text;
        j["label"] = std::string(label_name(ex.label));
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Splits

namespace {
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng::Stream stream(seed);
    rng::shuffle(idx, stream);
    return idx;
}
}  // namespace

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw Error("invalid-argument", "kfold_split: k must be >= 2");
    if (k > n) {
        throw Error("invalid-argument", "kfold_split: k = " + std::to_string(k) +
                                            " exceeds n = " + std::to_string(n));
    }
    const auto idx = shuffled_indices(n, seed);
    std::vector<Fold> folds(k);
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (i >= start && i < start + size) {
                folds[f].test.push_back(idx[i]);
            } else {
                folds[f].train.push_back(idx[i]);
            }
        }
        start += size;
    }
    return folds;
}

SplitSpec train_val_test_split(std::size_t n, double val_fraction, double test_fraction,
                               std::uint64_t seed) {
    if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0)) {
        throw Error("invalid-config", "split fractions must be >= 0 and sum below 1");
    }
    const auto idx = shuffled_indices(n, seed);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    SplitSpec s;
    s.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_val) {
            s.validation.push_back(idx[i]);
        } else if (i < n_val + n_test) {
            s.test.push_back(idx[i]);
        } else {
            s.train.push_back(idx[i]);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr std::array<std::string_view, 10> kDiseases = {
    "alzheimer's", "cancer",  "cough",  "depression",  "fever",
    "headache",    "migraine", "parkinson's", "stroke", "heart attack"};

constexpr std::array<std::string_view, 10> kHealthTemplates = {
    "just got diagnosed with {d}",
    "been suffering from {d} all week",
    "my {r} was diagnosed with {d} today",
    "doctor says my {d} is getting worse",
    "stuck in bed with {d} again",
    "my {r} is in hospital after the {d}",
    "taking meds for my {d} since monday",
    "cant sleep because of this {d}",
    "my {r} has been fighting {d} for years",
    "first day of chemo for my {d} wish me luck"};

constexpr std::array<std::string_view, 10> kFigurativeTemplates = {
    "this traffic jam is giving me a {d}",
    "i nearly had a {d} readin this",
    "nearly had a {d} laughing at this",
    "wow this is awesome it's like having a {d}",
    "that exam was a total {d}",
    "my {r} is a walking {d}",
    "this song is {d} for my ears",
    "the wifi here is worse than {d}",
    "monday meetings are a {d}",
    "watching my team play gives me {d}"};

constexpr std::array<std::string_view, 10> kNonHealthTemplates = {
    "{d} awareness month starts today",
    "new research on {d} published this week",
    "donate to the {d} research foundation",
    "article about {d} treatment costs",
    "charity run for {d} this weekend",
    "study links coffee to lower {d} risk",
    "the {d} foundation raises money for families",
    "watching a documentary about {d}",
    "my {r} is volunteering at a {d} fundraiser",
    "scientists debate new {d} guidelines"};

constexpr std::array<std::string_view, 8> kRelatives = {"mom", "dad",  "grandpa", "grandma",
                                                        "sister", "brother", "friend", "uncle"};
constexpr std::array<std::string_view, 10> kFillers = {"omg", "honestly", "ugh", "so",   "today",
                                                       "lol", "smh",      "tbh", "really", "wow"};
constexpr std::array<std::string_view, 6> kEmoji = {"\xF0\x9F\x98\x82", "\xF0\x9F\x98\xAD",
                                                    "\xF0\x9F\x98\xB7", "\xF0\x9F\x99\x8F",
                                                    "\xF0\x9F\x98\xA9", "\xF0\x9F\x92\x94"};

std::string fill(std::string_view tmpl, std::string_view disease, std::string_view relative) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
            out += tmpl[i + 1] == 'd' ? disease : relative;
            i += 2;
        } else {
            out += tmpl[i];
        }
    }
    return out;
}

}  // namespace

std::span<const std::string_view> synth_disease_lexicon() { return kDiseases; }

std::vector<RawExample> synth_generate(std::size_t n, std::uint64_t seed, double noise_rate) {
    if (n < 1) throw Error("invalid-argument", "synth_generate: n must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
        throw Error("invalid-argument", "synth_generate: noise_rate must be in [0, 1]");
    }
    rng::Stream stream(seed);
    auto choose = [&](const auto& arr) { return arr[stream.below(arr.size())]; };
    std::vector<RawExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        RawExample ex;
        std::string_view tmpl;
        switch (i % 3) {
            case 0:
                ex.label = RawLabel::health;
                tmpl = choose(kHealthTemplates);
                break;
            case 1:
                ex.label = RawLabel::figurative;
                tmpl = choose(kFigurativeTemplates);
                break;
            default:
                ex.label = RawLabel::non_health;
                tmpl = choose(kNonHealthTemplates);
                break;
        }
        const std::string_view disease = choose(kDiseases);
        std::string body = fill(tmpl, disease, choose(kRelatives));

        if (stream.uniform() < noise_rate) {
            // Drop about a third of the words, never the disease word itself.
            std::string kept;
            const auto disease_words = split_whitespace(disease);
            for (const auto& w : split_whitespace(body)) {
                const bool protect =
                    std::find(disease_words.begin(), disease_words.end(), w) != disease_words.end();
                if (!protect && stream.uniform() < 0.35) continue;
                if (!kept.empty()) kept += ' ';
                kept += w;
            }
            body = std::move(kept);
        }

        std::string text;
        if (stream.uniform() < 0.3) text += std::string(choose(kFillers)) + ' ';
        if (stream.uniform() < 0.2) text += "@user" + std::to_string(stream.below(1000)) + ' ';
        text += body;
        if (stream.uniform() < 0.3) text += ' ' + std::string(choose(kFillers));
        if (stream.uniform() < 0.25) text += ' ' + std::string(choose(kEmoji));
        if (stream.uniform() < 0.2) {
            std::string tag(disease);
            tag.erase(std::remove_if(tag.begin(), tag.end(),
                                     [](char c) { return c == ' ' || c == '\''; }),
                      tag.end());
            text += " #" + tag;
        }
        if (stream.uniform() < 0.2) text += " http://t.co/" + std::to_string(stream.below(100000));
        ex.text = std::move(text);
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace advbt
