#include <iostream>

#include "sfpn/cli.hpp"

int main(int argc, char** argv) { return sfpn::run_cli(argc, argv, std::cout, std::cerr); }
