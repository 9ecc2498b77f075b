#include <iostream>

#include "ldp/cli.hpp"

int main(int argc, char** argv) { return ldp::run_cli({argv + 1, argv + argc}, std::cout, std::cerr); }
