#include <iostream>

#include "aggify/cli.hpp"

int main(int argc, char** argv) { return aggify::run_cli(argc, argv, std::cout, std::cerr); }
