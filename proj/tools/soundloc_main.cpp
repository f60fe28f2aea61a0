// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#include "soundloc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return soundloc::cli::run_cli(args);
}
