#include "lesionfuse/cli.hpp"

int main(int argc, char** argv) { return lesionfuse::cli::main(argc, argv); }
