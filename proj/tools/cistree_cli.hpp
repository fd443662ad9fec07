#pragma once

// Entry point of the `cistree` binary, split out so tests can drive the
// command surface in-process and check exit codes.
int cistree_cli_main(int argc, char** argv);
