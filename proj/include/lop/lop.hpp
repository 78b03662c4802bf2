#pragma once

// Everything at once. Individual headers stay self-contained.

#include "lop/core/activation.hpp"
#include "lop/core/builder.hpp"
#include "lop/core/common.hpp"
#include "lop/core/finite_diff.hpp"
#include "lop/core/network.hpp"
#include "lop/core/random_arch.hpp"
#include "lop/core/serialize.hpp"

#include "lop/manifolds/certificate.hpp"
#include "lop/manifolds/cloning.hpp"
#include "lop/manifolds/confinement.hpp"
#include "lop/manifolds/curvature.hpp"
#include "lop/manifolds/frozen.hpp"
#include "lop/manifolds/partition.hpp"

#include "lop/kernel/kernel.hpp"
#include "lop/kernel/quadrature.hpp"

#include "lop/metrics/metrics.hpp"

#include "lop/optim/cbp.hpp"
#include "lop/optim/optimizer.hpp"

#include "lop/bench/bitflip.hpp"
#include "lop/bench/idx.hpp"
#include "lop/bench/tasks.hpp"

#include "lop/harness/aggregate.hpp"
#include "lop/harness/config.hpp"
#include "lop/harness/csv.hpp"
#include "lop/harness/plot.hpp"
#include "lop/harness/runlog.hpp"
#include "lop/harness/runner.hpp"
