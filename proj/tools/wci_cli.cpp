#include "wci/cli_reports.hpp"

int main(int argc, char** argv) { return wci::run_command(argc, argv); }
