#pragma once

#include "spdelab/error.hpp"
#include "spdelab/mesh.hpp"
#include "spdelab/operators.hpp"
#include "spdelab/nonlinearity.hpp"
#include "spdelab/noise.hpp"
#include "spdelab/dynamics.hpp"
#include "spdelab/deviations.hpp"
#include "spdelab/statistics.hpp"
#include "spdelab/montecarlo.hpp"
#include "spdelab/ldp.hpp"
#include "spdelab/config.hpp"
#include "spdelab/experiment.hpp"
