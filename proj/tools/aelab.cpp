#include <iostream>

#include "aelab/cli.hpp"

int main(int argc, char** argv) { return aelab::run_cli(argc, argv, std::cout, std::cerr); }
