#include "stagechain/cli/app.hpp"

int main(int argc, char** argv) { return stagechain::cli::run_cli(argc, argv); }
