#ifndef STAGEKD_CLI_HPP
#define STAGEKD_CLI_HPP

namespace stagekd {

// Exit codes: 0 success, 2 configuration/input error, 3 runtime training or
// IO error. Subcommands: train-teacher, distill, package-labels, eval,
// correlation, report-overhead.
int run_cli(int argc, const char* const* argv);

}  // namespace stagekd

#endif
