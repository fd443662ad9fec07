#include "cistree_cli.hpp"

int main(int argc, char** argv) { return cistree_cli_main(argc, argv); }
