#include <iostream>

#include "scns/cli.hpp"

int main(int argc, char** argv) {
  return scns::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
