#pragma once

#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include "lesionfuse/data.hpp"

namespace lesionfuse::cli {

enum ExitCode : int { ok = 0, verification_failed = 1, config_error = 2, runtime_fault = 3 };

int cmd_run(const std::string& config_path, const std::string& out, std::size_t parallel, std::ostream& log);
int cmd_report(const std::string& dir, std::ostream& out);
int cmd_gradcheck(const std::vector<std::string>& faults, double tolerance, std::ostream& out);
int cmd_synth(const SyntheticSpec& spec, const std::string& dir, std::ostream& out);

/// Entry point shared by the executable and the tests. Returns an ExitCode.
int main(int argc, const char* const* argv, std::ostream& out = std::cout);

}  // namespace lesionfuse::cli
