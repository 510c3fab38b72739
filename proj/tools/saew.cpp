// saew: SAE workbench command line. Placeholder while the library grows.
#include "saew/common.hpp"

#include <cstdio>

int main() {
    std::printf("saew: not wired up yet\n");
    return 0;
}
