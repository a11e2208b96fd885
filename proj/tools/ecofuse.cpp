#include <iostream>

#include "ecofuse/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return ecofuse::run_cli(args, std::cout, std::cerr);
}
