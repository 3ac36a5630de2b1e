#include "residscope/harness.hpp"

int main(int argc, char** argv) { return residscope::run_cli(argc, argv); }
