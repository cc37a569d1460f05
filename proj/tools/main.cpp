#include <iostream>

#include "psdlab/cli.hpp"

int main(int argc, char** argv) { return psdlab::runCli(argc, argv, std::cout, std::cerr); }
