#include "draft/cli.hpp"

int main(int argc, char** argv) { return draft::cli_main(argc, argv); }
