#include "cli.hpp"

int main(int argc, char** argv) { return neuromatch::cli::dispatch(argc, argv); }
