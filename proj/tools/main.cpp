#include "dvit/cli.hpp"

int main(int argc, char** argv) { return dvit::cli::run(argc, argv); }
