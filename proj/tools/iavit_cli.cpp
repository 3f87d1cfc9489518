// SPDX-License-Identifier: Apache-2.0
#include "iavit/cli/app.hpp"

int main(int argc, char** argv) { return iavit::run_cli(argc, argv); }
