#include "dvs/cli.hpp"

int main(int argc, char** argv) { return dvs::run_cli(argc, argv); }
