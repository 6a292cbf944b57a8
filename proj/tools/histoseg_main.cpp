#include "histoseg/cli.hpp"

int main(int argc, char** argv) { return histoseg::run_cli(argc, argv); }
