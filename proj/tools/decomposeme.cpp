#include <iostream>
#include <string>
#include <vector>

#include "decomposeme/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return decomposeme::run_cli(args, std::cout, std::cerr);
}
