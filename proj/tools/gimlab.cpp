#include "gimlab/cli.hpp"

int main(int argc, char** argv) { return gimlab::cli::run(argc, argv); }
