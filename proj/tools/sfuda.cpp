#include "sfuda/cli.hpp"

int main(int argc, char** argv) { return sfuda::cli_main(argc, argv); }
