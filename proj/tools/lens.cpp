#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) {
  lens::cli::configure_logging();
  return lens::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
