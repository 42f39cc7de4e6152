#include "attrinet/cli.hpp"

int main(int argc, char** argv) { return attrinet::cli::run(argc, argv); }
