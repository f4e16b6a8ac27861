#include "ppnmm/cli.hpp"

int main(int argc, char** argv) { return ppnmm::run_cli(argc, argv); }
