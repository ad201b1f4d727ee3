#include "stagekd/cli.hpp"

int main(int argc, char** argv) { return stagekd::run_cli(argc, argv); }
