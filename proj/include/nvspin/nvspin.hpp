#pragma once

// Umbrella header for the NV-center spin simulator.

#include "nvspin/types.hpp"
#include "nvspin/spin_core.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/parallel.hpp"
#include "nvspin/dynamics.hpp"
#include "nvspin/floquet.hpp"
#include "nvspin/pumping.hpp"
#include "nvspin/fitting.hpp"
#include "nvspin/io.hpp"
