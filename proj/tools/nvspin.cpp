#include "nvspin/cli.hpp"

int main(int argc, char **argv) { return nvspin::cli::cli_main(argc, argv); }
