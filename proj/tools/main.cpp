// SPDX-License-Identifier: Apache-2.0
#include "ilin/cli.hpp"

int main(int argc, char** argv) { return ilin::cli::run(argc, argv); }
