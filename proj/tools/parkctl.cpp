#include "cli.hpp"

int main(int argc, char** argv) { return parkctl::run(argc, argv); }
