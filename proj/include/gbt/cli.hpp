#pragma once

#include <string>
#include <vector>

namespace gbt {

/// Command-line entry point. args excludes the program name.
/// Exit codes: 0 success, 1 usage error, 2 runtime failure,
/// 3 acceptance-check failure (gradcheck over tolerance).
int dispatch(const std::vector<std::string>& args);

}  // namespace gbt
