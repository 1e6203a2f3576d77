#include <iostream>

#include "dael/cli.hpp"

int main(int argc, char** argv) { return dael::cli::run(argc, argv, std::cout, std::cerr); }
