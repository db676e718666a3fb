#include "advbt/checkpoint.hpp"

#include <map>
#include <sstream>

#include "advbt/io.hpp"

namespace advbt {

namespace {

constexpr std::string_view kMagic = "advbt-checkpoint 1";

void write_row(std::ostringstream& os, const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (i) os << ' ';
        os << format_double(p[i]);
    }
    os << '\n';
}

void write_tensor(std::ostringstream& os, const std::string& name, const Tensor& t) {
    os << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape) os << ' ' << d;
    os << '\n';
    const std::size_t cols = t.shape.back();
    for (std::size_t off = 0; off < t.data.size(); off += cols) write_row(os, t.data.data() + off, cols);
}

void write_stats(std::ostringstream& os, const std::string& name, const RunningStats& s) {
    os << "stats " << name << ' ' << s.mean.size() << '\n';
    write_row(os, s.mean.data(), s.mean.size());
    write_row(os, s.var.data(), s.var.size());
}

[[noreturn]] void bad(std::size_t line, const std::string& what) {
    throw Error("invalid-checkpoint", "line " + std::to_string(line) + ": " + what);
}

class LineReader {
public:
    explicit LineReader(std::string_view text) : text_(text) {}

    std::string_view next() {
        if (pos_ >= text_.size()) bad(line_ + 1, "unexpected end of file");
        const auto nl = text_.find('\n', pos_);
        const auto end = nl == std::string_view::npos ? text_.size() : nl;
        std::string_view out = text_.substr(pos_, end - pos_);
        pos_ = end + 1;
        ++line_;
        return out;
    }
    std::size_t line() const { return line_; }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t line_ = 0;
};

std::vector<std::string> words(std::string_view line) {
    std::vector<std::string> out;
    std::istringstream is{std::string(line)};
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

std::size_t parse_count(const std::string& s, std::size_t line) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        bad(line, "expected a count, got '" + s + "'");
    }
    if (used != s.size()) bad(line, "expected a count, got '" + s + "'");
    return static_cast<std::size_t>(v);
}

std::vector<double> parse_row(std::string_view line, std::size_t n, std::size_t lineno) {
    const auto w = words(line);
    if (w.size() != n) {
        bad(lineno, "expected " + std::to_string(n) + " values, got " + std::to_string(w.size()));
    }
    std::vector<double> out;
    out.reserve(n);
    for (const auto& s : w) {
        try {
            out.push_back(parse_double(s));
        } catch (const Error& e) {
            bad(lineno, e.what());
        }
    }
    return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
    if (ck.config.encoder.vocab_size != ck.vocab.size()) {
        throw Error("invalid-checkpoint", "config vocab_size does not match the vocabulary");
    }
    if (!(ck.model.config == ck.config.encoder)) {
        throw Error("invalid-checkpoint", "model was built with a different encoder config");
    }
    std::ostringstream os;
    os << kMagic << '\n';
    const auto kv = to_key_values(ck.config);
    os << "config " << kv.size() << '\n';
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
    os << "vocab " << ck.vocab.size() << '\n';
    for (const auto& t : ck.vocab.tokens()) os << t << '\n';
    ck.model.for_each_parameter([&](const std::string& name, const Tensor& t) { write_tensor(os, name, t); });
    ck.head.for_each_parameter([&](const std::string& name, const Tensor& t) { write_tensor(os, name, t); });
    write_stats(os, "projection.norm1", ck.head.norm1.stats);
    write_stats(os, "projection.norm2", ck.head.norm2.stats);
    os << "end\n";
    return os.str();
}

Checkpoint parse_checkpoint(std::string_view text) {
    LineReader in(text);
    if (in.next() != kMagic) bad(1, "not a checkpoint (missing header)");

    auto head_words = words(in.next());
    if (head_words.size() != 2 || head_words[0] != "config") bad(in.line(), "expected 'config <n>'");
    const std::size_t n_config = parse_count(head_words[1], in.line());
    std::string config_text;
    for (std::size_t i = 0; i < n_config; ++i) {
        config_text += in.next();
        config_text += '\n';
    }

    Checkpoint ck;
    try {
        ck.config = apply_key_values(ExperimentConfig{}, parse_key_values(config_text));
    } catch (const Error& e) {
        throw Error("invalid-checkpoint", std::string("config section: ") + e.what());
    }

    head_words = words(in.next());
    if (head_words.size() != 2 || head_words[0] != "vocab") bad(in.line(), "expected 'vocab <n>'");
    const std::size_t n_vocab = parse_count(head_words[1], in.line());
    std::vector<std::string> tokens;
    tokens.reserve(n_vocab);
    for (std::size_t i = 0; i < n_vocab; ++i) tokens.emplace_back(in.next());
    ck.vocab = Vocab::from_tokens(std::move(tokens));
    ck.config.encoder.vocab_size = ck.vocab.size();
    ck.config.validate();

    ck.model = EncoderModel::init(ck.config.encoder, 0);
    ck.head = ProjectionHead::init(ck.config.encoder.hidden_dim, ck.config.proj_dim, 0);

    std::map<std::string, Tensor*> slots;
    ck.model.for_each_parameter([&](const std::string& name, Tensor& t) { slots[name] = &t; });
    ck.head.for_each_parameter([&](const std::string& name, Tensor& t) { slots[name] = &t; });
    std::map<std::string, RunningStats*> stats{{"projection.norm1", &ck.head.norm1.stats},
                                               {"projection.norm2", &ck.head.norm2.stats}};

    for (;;) {
        const auto w = words(in.next());
        const std::size_t at = in.line();
        if (w.size() == 1 && w[0] == "end") break;
        if (w.size() >= 3 && w[0] == "tensor") {
            auto it = slots.find(w[1]);
            if (it == slots.end()) bad(at, "unexpected tensor " + w[1]);
            const std::size_t rank = parse_count(w[2], at);
            if (w.size() != 3 + rank) bad(at, "tensor header rank mismatch");
            Shape shape;
            for (std::size_t i = 0; i < rank; ++i) shape.push_back(parse_count(w[3 + i], at));
            Tensor& dst = *it->second;
            if (shape != dst.shape) {
                bad(at, "tensor " + w[1] + " has shape " + shape_string(shape) + ", config expects " +
                            shape_string(dst.shape));
            }
            const std::size_t cols = shape.back();
            for (std::size_t off = 0; off < dst.data.size(); off += cols) {
                const auto row = parse_row(in.next(), cols, in.line());
                std::copy(row.begin(), row.end(), dst.data.begin() + static_cast<std::ptrdiff_t>(off));
            }
            slots.erase(it);
        } else if (w.size() == 3 && w[0] == "stats") {
            auto it = stats.find(w[1]);
            if (it == stats.end()) bad(at, "unexpected stats " + w[1]);
            const std::size_t d = parse_count(w[2], at);
            if (d != it->second->mean.size()) bad(at, "stats " + w[1] + " has the wrong width");
            it->second->mean = parse_row(in.next(), d, in.line());
            it->second->var = parse_row(in.next(), d, in.line());
            stats.erase(it);
        } else {
            bad(at, "unrecognised section");
        }
    }
    if (!slots.empty()) throw Error("invalid-checkpoint", "missing tensor " + slots.begin()->first);
    if (!stats.empty()) throw Error("invalid-checkpoint", "missing stats " + stats.begin()->first);
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    atomic_write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw Error("file-not-found", "checkpoint " + path.string() + " does not exist");
    }
    return parse_checkpoint(read_file(path));
}

}  // namespace advbt
