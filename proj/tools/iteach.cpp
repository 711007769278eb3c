#include "iteach/cli.hpp"

int main(int argc, char** argv) { return iteach::cli::dispatch(argc, argv); }
