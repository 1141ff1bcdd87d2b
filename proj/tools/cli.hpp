#pragma once

// Command-line front end: `neuromatch <subcommand> [flags]`.

namespace neuromatch::cli {

// Exit codes: 0 success, 1 usage/configuration, 2 data or shape, 3 numeric.
int dispatch(int argc, char** argv);

}  // namespace neuromatch::cli
