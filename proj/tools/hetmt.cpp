#include <iostream>

#include "hetmt/cli.hpp"

int main(int argc, char** argv) { return hetmt::cli::dispatch(argc, argv, std::cout, std::cerr); }
