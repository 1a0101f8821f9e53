#include "dicap/cli.hpp"

int main(int argc, char** argv) { return dicap::run_command(argc, argv); }
