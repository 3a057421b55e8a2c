#include "mtuda/cli.hpp"

int main(int argc, char** argv) { return mtuda::run_cli(argc, argv); }
