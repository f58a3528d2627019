#pragma once

#include "stage/config.hpp"
#include "stage/denoiser.hpp"
#include "stage/ema.hpp"
#include "stage/grid.hpp"
#include "stage/grid_io.hpp"
#include "stage/rng.hpp"
#include "stage/sampler.hpp"
#include "stage/schedule.hpp"
#include "stage/synthesis.hpp"
