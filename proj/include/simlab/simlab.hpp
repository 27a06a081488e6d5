#pragma once

/// Umbrella header.

#include "simlab/analysis.hpp"
#include "simlab/errors.hpp"
#include "simlab/experiment.hpp"
#include "simlab/losses.hpp"
#include "simlab/optimizer.hpp"
#include "simlab/sphere.hpp"
