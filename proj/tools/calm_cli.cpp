#include "calm/cli.hpp"

int main(int argc, char** argv) { return calm::cli::run(argc, argv); }
