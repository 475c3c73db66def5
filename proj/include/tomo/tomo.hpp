#pragma once

// Umbrella header for the whole toolkit.

#include "tomo/core.hpp"
#include "tomo/fbp.hpp"
#include "tomo/io.hpp"
#include "tomo/metrics.hpp"
#include "tomo/nn.hpp"
#include "tomo/noise.hpp"
#include "tomo/parallel.hpp"
#include "tomo/phantom.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"
#include "tomo/tv.hpp"
#include "tomo/unrolled.hpp"
