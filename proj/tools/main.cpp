#include "rlrr/cli.hpp"

int main(int argc, char** argv) { return rlrr::cli::run(argc, argv); }
