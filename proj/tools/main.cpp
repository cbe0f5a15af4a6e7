#include "spurclip/cli.hpp"

int main(int argc, char** argv) { return spurclip::cli::run(argc, argv); }
