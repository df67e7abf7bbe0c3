#include "vangogh/cli.hpp"

int main(int argc, char** argv) { return vangogh::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
