#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace msgnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPrerequisite = 3;

/// Environment variable naming the config file used when --config is absent.
inline constexpr const char* kConfigEnv = "MSGNET_CONFIG";

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct CommandInfo {
    std::string name;
    std::vector<std::string> flags;  // long names, with leading dashes
};

/// Every subcommand with its flags, read from the parser definition.
std::vector<CommandInfo> commands();

/// `msgnet <command> --help` output; empty command gives the top-level help.
std::string help_text(const std::string& command);

}  // namespace msgnet::cli
