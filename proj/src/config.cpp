#include "advbt/config.hpp"

#include <charconv>
#include <sstream>

#include "advbt/io.hpp"

namespace advbt {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
    throw Error("invalid-config", "bad value for " + key + ": '" + value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size()) bad_value(key, value);
    return v;
}

std::size_t to_size(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(to_u64(key, value));
}

double to_real(const std::string& key, const std::string& value) {
    try {
        return parse_double(value);
    } catch (const Error&) {
        bad_value(key, value);
    }
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>) {
            out += format_double(items[i]);
        } else {
            out += std::to_string(items[i]);
        }
    }
    return out;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

}  // namespace

KeyValues parse_key_values(std::string_view text) {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw Error("invalid-config", "config line " + std::to_string(lineno) + ": expected key = value");
        }
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

std::string format_key_values(const KeyValues& values) {
    std::string out;
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
    return out;
}

KeyValues to_key_values(const ExperimentConfig& c) {
    KeyValues kv;
    kv["schema_version"] = std::to_string(kConfigSchemaVersion);
    kv["seed"] = std::to_string(c.seed);
    kv["c"] = format_double(c.c);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["lr"] = format_double(c.lr);
    kv["weight_decay"] = format_double(c.weight_decay);
    kv["epochs"] = std::to_string(c.epochs);
    kv["patience"] = std::to_string(c.patience);
    kv["use_bt"] = bool_str(c.use_bt);
    kv["use_adv"] = bool_str(c.use_adv);
    kv["proj_dim"] = std::to_string(c.proj_dim);
    kv["noise.mu"] = format_double(c.noise.mu);
    kv["noise.sigma"] = format_double(c.noise.sigma);
    kv["noise.layer"] = std::to_string(c.noise.layer);
    kv["bt.lambda"] = format_double(c.bt.lambda);
    kv["bt.eps"] = format_double(c.bt.eps);
    kv["encoder.max_seq_len"] = std::to_string(c.encoder.max_seq_len);
    kv["encoder.hidden_dim"] = std::to_string(c.encoder.hidden_dim);
    kv["encoder.num_layers"] = std::to_string(c.encoder.num_layers);
    kv["encoder.num_heads"] = std::to_string(c.encoder.num_heads);
    kv["encoder.ffn_dim"] = std::to_string(c.encoder.ffn_dim);
    kv["encoder.num_classes"] = std::to_string(c.encoder.num_classes);
    kv["encoder.dropout_rate"] = format_double(c.encoder.dropout_rate);
    kv["encoder.layer_norm_eps"] = format_double(c.encoder.layer_norm_eps);
    kv["data.val_fraction"] = format_double(c.data.val_fraction);
    kv["data.test_fraction"] = format_double(c.data.test_fraction);
    kv["data.strict_hashtags"] = bool_str(c.data.strict_hashtags);
    kv["data.min_count"] = std::to_string(c.data.min_count);
    kv["grid.layers"] = join(c.grid.layers);
    kv["grid.c_values"] = join(c.grid.c_values);
    kv["grid.batch_sizes"] = join(c.grid.batch_sizes);
    return kv;
}

ExperimentConfig apply_key_values(ExperimentConfig c, const KeyValues& values) {
    for (const auto& [key, value] : values) {
        if (key == "schema_version") {
            if (to_size(key, value) != kConfigSchemaVersion) {
                throw Error("invalid-config", "unsupported config schema_version " + value);
            }
        } else if (key == "seed") c.seed = to_u64(key, value);
        else if (key == "c") c.c = to_real(key, value);
        else if (key == "batch_size") c.batch_size = to_size(key, value);
        else if (key == "lr") c.lr = to_real(key, value);
        else if (key == "weight_decay") c.weight_decay = to_real(key, value);
        else if (key == "epochs") c.epochs = to_size(key, value);
        else if (key == "patience") c.patience = to_size(key, value);
        else if (key == "use_bt") c.use_bt = to_bool(key, value);
        else if (key == "use_adv") c.use_adv = to_bool(key, value);
        else if (key == "proj_dim") c.proj_dim = to_size(key, value);
        else if (key == "noise.mu") c.noise.mu = to_real(key, value);
        else if (key == "noise.sigma") c.noise.sigma = to_real(key, value);
        else if (key == "noise.layer") c.noise.layer = to_size(key, value);
        else if (key == "bt.lambda") c.bt.lambda = to_real(key, value);
        else if (key == "bt.eps") c.bt.eps = to_real(key, value);
        else if (key == "encoder.max_seq_len") c.encoder.max_seq_len = to_size(key, value);
        else if (key == "encoder.hidden_dim") c.encoder.hidden_dim = to_size(key, value);
        else if (key == "encoder.num_layers") c.encoder.num_layers = to_size(key, value);
        else if (key == "encoder.num_heads") c.encoder.num_heads = to_size(key, value);
        else if (key == "encoder.ffn_dim") c.encoder.ffn_dim = to_size(key, value);
        else if (key == "encoder.num_classes") c.encoder.num_classes = to_size(key, value);
        else if (key == "encoder.dropout_rate") c.encoder.dropout_rate = to_real(key, value);
        else if (key == "encoder.layer_norm_eps") c.encoder.layer_norm_eps = to_real(key, value);
        else if (key == "data.val_fraction") c.data.val_fraction = to_real(key, value);
        else if (key == "data.test_fraction") c.data.test_fraction = to_real(key, value);
        else if (key == "data.strict_hashtags") c.data.strict_hashtags = to_bool(key, value);
        else if (key == "data.min_count") c.data.min_count = to_size(key, value);
        else if (key == "grid.layers" || key == "grid.batch_sizes") {
            std::vector<std::size_t> items;
            for (const auto& s : split_list(value)) items.push_back(to_size(key, s));
            (key == "grid.layers" ? c.grid.layers : c.grid.batch_sizes) = std::move(items);
        } else if (key == "grid.c_values") {
            c.grid.c_values.clear();
            for (const auto& s : split_list(value)) c.grid.c_values.push_back(to_real(key, s));
        } else {
            throw Error("invalid-config", "unknown config key '" + key + "'");
        }
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error&) {
        throw Error("config-not-found", "cannot open config " + path.string());
    }
    return apply_key_values(ExperimentConfig{}, parse_key_values(text));
}

std::string format_config(const ExperimentConfig& config) {
    return format_key_values(to_key_values(config));
}

}  // namespace advbt
