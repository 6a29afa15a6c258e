#include <iostream>

#include "icvseg/cli.hpp"

int main(int argc, char** argv) { return icvseg::cli::run(argc, argv, std::cout, std::cerr); }
