#include <iostream>

#include "mad/cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mad::cli::run(args, std::cout, std::cerr);
}
