#include "mrfn/cli.hpp"

int main(int argc, char** argv) { return mrfn::cli::run(argc, argv); }
