#include <iostream>
#include <string>
#include <vector>

#include "tbx/cli.hpp"

int main(int argc, char** argv) {
  return tbx::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
