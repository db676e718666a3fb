#pragma once

#include <stdexcept>
#include <string>

namespace advbt {

// Every failure carries a short machine-readable class ("shape-mismatch",
// "corpus-not-found", ...) next to the human message. The CLI prints the
// class verbatim, so keep them kebab-case and stable.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

}  // namespace advbt
