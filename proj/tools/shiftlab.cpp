#include <iostream>

#include "shiftlab/cli.hpp"

int main(int argc, char** argv) { return shiftlab::cli::run_cli(argc, argv, std::cout, std::cerr); }
