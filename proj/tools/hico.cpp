#include "hico/cli.hpp"

int main(int argc, char** argv) { return hico::run_cli(argc, argv); }
