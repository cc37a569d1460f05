#pragma once

#include <iosfwd>

namespace psdlab {

// Entry point of the psdlab command-line tool: gen, calibrate, label, train, eval, ablate.
// Returns the process exit code. Output goes to out, diagnostics to err.
int runCli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace psdlab
