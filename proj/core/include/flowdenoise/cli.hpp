#pragma once

namespace fdn::cli {

// Parses argv and dispatches to the train / enhance / featurize /
// prepare-stimuli / gradcheck subcommands. Returns the process exit code:
// 0 on success, nonzero on any parse or module error.
int run(int argc, const char* const* argv);

}  // namespace fdn::cli
