#pragma once

#include "ppnmm/core_model.hpp"
#include "ppnmm/rng.hpp"
#include "ppnmm/parallel.hpp"
#include "ppnmm/chmc.hpp"
#include "ppnmm/endmember_init.hpp"
#include "ppnmm/gibbs.hpp"
#include "ppnmm/synthgen.hpp"
#include "ppnmm/metrics.hpp"
#include "ppnmm/io.hpp"
