#pragma once

#include "mixcert/certification.hpp"
#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/experiments.hpp"
#include "mixcert/hash.hpp"
#include "mixcert/image.hpp"
#include "mixcert/io.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/numeric.hpp"
#include "mixcert/rng.hpp"
#include "mixcert/run_config.hpp"
#include "mixcert/solvers.hpp"
