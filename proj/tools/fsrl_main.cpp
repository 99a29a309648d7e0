#include <string>
#include <vector>

#include "fsrl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return fsrl::cli_dispatch(args);
}
