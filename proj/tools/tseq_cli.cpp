// SPDX-License-Identifier: Apache-2.0

#include "tseq/cli.hpp"

int main(int argc, char** argv) { return tseq::cli::run(argc, argv); }
