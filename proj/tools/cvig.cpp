#include <iostream>
#include <string>
#include <vector>

#include "cvig/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cvig::cli::run(args, std::cout, std::cerr);
}
