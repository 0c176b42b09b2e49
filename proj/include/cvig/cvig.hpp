#pragma once

#include "cvig/bench.hpp"
#include "cvig/checkpoint.hpp"
#include "cvig/cluster.hpp"
#include "cvig/config.hpp"
#include "cvig/degc.hpp"
#include "cvig/gradcheck.hpp"
#include "cvig/graph.hpp"
#include "cvig/model.hpp"
#include "cvig/ops.hpp"
#include "cvig/parallel.hpp"
#include "cvig/params.hpp"
#include "cvig/rng.hpp"
#include "cvig/tape.hpp"
#include "cvig/tensor.hpp"
#include "cvig/train.hpp"
