// SPDX-License-Identifier: Apache-2.0
#include "hdrdiff/cli.hpp"

int main(int argc, char** argv) { return hdrdiff::cli::run(argc, argv); }
