#pragma once

#include <cstddef>
#include <vector>

namespace advbt {

// Reserved vocabulary ids, shared by the encoder and the text pipeline.
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kUnkId = 2;

// Row-major [batch, seq] token ids with a matching key mask (1 = real token).
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> ids;
    std::vector<unsigned char> mask;
    std::vector<int> labels;  // empty when unlabeled
};

}  // namespace advbt
