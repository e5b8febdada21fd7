#include <string>
#include <vector>

#include "mantis/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mantis::run(args);
}
