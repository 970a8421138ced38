#include "uniphynet/cli.hpp"

int main(int argc, char** argv) { return uniphynet::cli::run_command(argc, argv); }
