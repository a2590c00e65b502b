#include <vector>

#include "gbt/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return gbt::dispatch(args);
}
