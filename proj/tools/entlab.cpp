#include "entlab/cli.hpp"

int main(int argc, char** argv) { return entlab::cli::main(argc, argv); }
