#include <iostream>

#include "snapmmd/cli.hpp"

int main(int argc, char** argv) { return snapmmd::run_cli(argc, argv, std::cout, std::cerr); }
