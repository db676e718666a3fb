#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "advbt/config.hpp"

namespace advbt {

struct Checkpoint {
    ExperimentConfig config;  // config.encoder.vocab_size == vocab.size()
    Vocab vocab;
    EncoderModel model;
    ProjectionHead head;
};

// Plain-text format:
//   advbt-checkpoint 1
//   config <n>        followed by n `key = value` lines
//   vocab <n>         followed by n tokens, one per line, in id order
//   tensor <name> <rank> <dims...>   followed by one line per row
//   stats <name> <d>  mean line, then var line (batch-norm running statistics)
//   end
// Output is a pure function of the contents, so equal models give equal bytes.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace advbt
