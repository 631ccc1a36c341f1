#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "covmoe/errors.hpp"

namespace covmoe {

struct CommandOptions {
    std::filesystem::path config;
    std::optional<std::filesystem::path> out;         // overrides the config's output directory
    std::optional<std::string> axis;                  // ablate
    std::optional<std::filesystem::path> checkpoint;  // eval
};

// Each command validates the whole config before doing any work and writes
// only inside its output directory. Results that are meant for a terminal go
// to `out`.
void cmd_train(const CommandOptions& o, std::ostream& out);
void cmd_fed_sim(const CommandOptions& o, std::ostream& out);
void cmd_ablate(const CommandOptions& o, std::ostream& out);
void cmd_eval(const CommandOptions& o, std::ostream& out);

/// 2 config/input, 3 protocol, 4 checkpoint, 1 anything else.
int exit_code_for(ErrorKind kind);

/// Runs `fn`; on failure prints {"error": {kind, message, exit_code}} to `err`
/// and returns the mapped exit code.
int run_guarded(const std::function<void()>& fn, std::ostream& err);

}  // namespace covmoe
