#include <iostream>
#include <string>
#include <vector>

#include "milkit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return milkit::cli(args, std::cout, std::cerr);
}
