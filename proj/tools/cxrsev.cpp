#include <iostream>

#include "cxrsev/cli.hpp"

int main(int argc, char** argv) { return cxrsev::dispatch(argc, argv, std::cout, std::cerr); }
