#pragma once

#include "lop/core/random_arch.hpp"

namespace lop::testing {

using lop::all_kinds_network;
using lop::random_problem;
using lop::RandomProblem;

}  // namespace lop::testing
