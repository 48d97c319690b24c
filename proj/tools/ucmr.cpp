#include "ucmr/cli.hpp"

int main(int argc, char** argv) { return ucmr::cli::run(argc, argv); }
