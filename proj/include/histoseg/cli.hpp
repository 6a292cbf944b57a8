#pragma once

namespace histoseg {

// Entry point shared by the histoseg binary and the CLI tests. Parses
// argv into one of the subcommands (synth, patch, train, predict, eval,
// gradcheck, flops) and returns the process exit code: 0 only when the
// command ran to completion.
int run_cli(int argc, const char* const* argv);

}  // namespace histoseg
