#include <iostream>

#include "spt/cli.hpp"

int main(int argc, char** argv) {
    return spt::cli_main({argv + 1, argv + argc}, std::cout, std::cerr);
}
