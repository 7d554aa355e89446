#include "rtfusion/cli.hpp"

int main(int argc, char** argv) { return rtfusion::cli::run(argc, argv); }
