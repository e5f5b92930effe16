#include "cstop/harness.hpp"

int main(int argc, char** argv) { return cstop::run(argc, argv); }
