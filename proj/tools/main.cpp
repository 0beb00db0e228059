#include "commands.hpp"

int main(int argc, char** argv) { return dualreg::cli::run(argc, argv); }
