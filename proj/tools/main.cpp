#include "codednet/cli.hpp"

int main(int argc, char** argv) { return codednet::cli::run(argc, argv); }
