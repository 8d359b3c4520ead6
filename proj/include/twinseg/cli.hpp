#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace twinseg {

/// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitRuntime = 3;

/// Entry point behind the `twinseg` binary. `args` excludes the program name.
/// Commands: train, eval, seed-eval, synth-gen, report.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace twinseg
