#include "xcal/cli.hpp"

int main(int argc, char** argv) { return xcal::cli::run(argc, argv); }
