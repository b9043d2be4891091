#include "dtok/cli.hpp"

int main(int argc, char** argv) { return dtok::cli::run(argc, argv); }
