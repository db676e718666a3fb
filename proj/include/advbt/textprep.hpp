#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "advbt/batch.hpp"

namespace advbt {

enum class RawLabel { health, non_health, figurative };

RawLabel parse_label(std::string_view name);  // "health" | "non-health" | "figurative"
std::string_view label_name(RawLabel label);

struct RawExample {
    std::string text;
    RawLabel label = RawLabel::health;
    bool operator==(const RawExample&) const = default;
};

// Figurative and non-health mentions form the negative class.
int merge_labels(const RawExample& example);
int merge_labels(RawLabel label);

// Codepoint sequence -> lowercase name, matched longest-first.
class EmojiTable {
public:
    // Tab-separated lines: hex codepoints (space separated) <TAB> name. '#' starts a comment.
    static EmojiTable from_tsv(std::istream& in);
    static EmojiTable from_tsv_text(std::string_view text);
    // The bundled table (about two hundred common emoji; not the full Unicode set).
    static const EmojiTable& builtin();

    // Length in bytes of the longest entry matching at `pos`, or 0.
    std::size_t match(std::string_view text, std::size_t pos, std::string_view* name) const;
    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::unordered_map<std::string, std::string> entries_;
    std::size_t max_key_bytes_ = 0;
};

struct PreprocessOptions {
    // Drop hashtags entirely instead of keeping the tag word.
    bool strict_hashtags = false;
};

// Applied in order: emoji -> " name "; delete URLs (scheme-prefixed, www., bare
// t.co/...); delete @mentions; strip '#' from hashtags (or the whole tag when
// strict); map ASCII whitespace to ' ' and delete everything except ASCII
// letters, digits, space and apostrophe; lowercase; collapse spaces; trim.
// Idempotent.
std::string preprocess(std::string_view text, const PreprocessOptions& options = {},
                       const EmojiTable& emoji = EmojiTable::builtin());

std::vector<std::string> split_whitespace(std::string_view text);

class Vocab {
public:
    Vocab();  // reserved entries only

    // Tokens of the given (preprocessed) texts, sorted, ids from 3 upward.
    static Vocab build(std::span<const std::string> texts, std::size_t min_count = 1);
    static Vocab from_tokens(std::vector<std::string> tokens);

    int id(std::string_view token) const;  // kUnkId when absent
    const std::string& token(int id) const;
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

struct EncodedExample {
    std::vector<int> token_ids;               // length max_seq_len, [CLS] first
    std::vector<unsigned char> attention_mask;  // 1 on real tokens, padding is a suffix
    int label = 0;                            // 1 = health
    std::size_t length() const;               // number of unmasked positions
};

EncodedExample tokenize_encode(std::string_view text, const Vocab& vocab, std::size_t max_seq_len,
                               int label = 0);
// In-vocabulary tokens after [CLS], up to the first padding position.
std::vector<std::string> decode(const EncodedExample& example, const Vocab& vocab);

// Builds a batch from the selected examples, trimmed to the longest one.
TokenBatch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> indices);
TokenBatch make_batch(std::span<const EncodedExample> examples);

enum class CorpusFormat { jsonl, csv };
CorpusFormat corpus_format_for(const std::filesystem::path& path);

std::vector<RawExample> load_corpus(const std::filesystem::path& path, CorpusFormat format);
std::vector<RawExample> parse_corpus(std::istream& in, CorpusFormat format);
void write_corpus_jsonl(std::ostream& out, std::span<const RawExample> examples);

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Seeded shuffle, then k contiguous folds; the first n % k folds get one extra index.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

struct SplitSpec {
    std::vector<std::size_t> train, validation, test;
    std::uint64_t seed = 0;
};

SplitSpec train_val_test_split(std::size_t n, double val_fraction, double test_fraction,
                               std::uint64_t seed);

// Template corpus with literal, figurative and non-health uses of disease
// words. Families cycle health, figurative, non-health. A `noise_rate`
// fraction of examples loses random non-disease tokens.
std::vector<RawExample> synth_generate(std::size_t n, std::uint64_t seed, double noise_rate = 0.1);

// Disease words used by the generator.
std::span<const std::string_view> synth_disease_lexicon();

}  // namespace advbt
