#include <iostream>

#include "driftlm/cli.hpp"

int main(int argc, char** argv) { return driftlm::run_cli(argc, argv, std::cout, std::cerr); }
