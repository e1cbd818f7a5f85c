#include "hmeta/cli.hpp"

int main(int argc, char** argv) { return hmeta::run_cli(argc, argv); }
