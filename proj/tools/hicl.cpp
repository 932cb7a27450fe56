#include <iostream>

#include "hicl/cli.hpp"

int main(int argc, char** argv) { return hicl::run_cli(argc, argv, std::cout, std::cerr); }
