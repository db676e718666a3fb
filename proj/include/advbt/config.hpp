#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "advbt/trainer.hpp"

namespace advbt {

inline constexpr int kConfigSchemaVersion = 1;

using KeyValues = std::map<std::string, std::string>;

// Flat `key = value` document; '#' starts a comment. Keys:
//   schema_version, seed, c, batch_size, lr, weight_decay, epochs, patience,
//   use_bt, use_adv, proj_dim,
//   noise.mu, noise.sigma, noise.layer,
//   bt.lambda, bt.eps,
//   encoder.max_seq_len, encoder.hidden_dim, encoder.num_layers, encoder.num_heads,
//   encoder.ffn_dim, encoder.num_classes, encoder.dropout_rate, encoder.layer_norm_eps,
//   data.val_fraction, data.test_fraction, data.strict_hashtags, data.min_count,
//   grid.layers, grid.c_values, grid.batch_sizes   (comma-separated lists)
// encoder.vocab_size is not a config key: it comes from the training vocabulary.
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& values);

KeyValues to_key_values(const ExperimentConfig& config);
// Starts from `base` and applies every key present; unknown keys are errors.
ExperimentConfig apply_key_values(ExperimentConfig base, const KeyValues& values);

ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);

}  // namespace advbt
