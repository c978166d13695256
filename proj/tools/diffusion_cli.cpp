#include <iostream>

#include "diffusion/cli.hpp"

int main(int argc, char** argv) { return diffusion::run_cli(argc, argv, std::cout, std::cerr); }
