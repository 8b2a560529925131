#include "moecl/cli.hpp"

int main(int argc, char** argv) { return moecl::cli_main(argc, argv); }
