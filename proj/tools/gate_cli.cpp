#include <iostream>

#include "gate/cli.hpp"

int main(int argc, char** argv) { return gate::run_cli(argc, argv, std::cout, std::cerr); }
