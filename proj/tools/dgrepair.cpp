// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "dgrepair/cli.hpp"

int main(int argc, char** argv) { return dgr::run_cli(argc, argv, std::cout, std::cerr); }
