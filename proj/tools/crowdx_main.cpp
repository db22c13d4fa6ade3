#include <iostream>
#include <string>
#include <vector>

#include "crowdx/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crowdx::dispatch(args, std::cout, std::cerr);
}
