#pragma once

#include "shiftlab/config.hpp"
#include "shiftlab/error.hpp"
#include "shiftlab/harness.hpp"
#include "shiftlab/matrix.hpp"
#include "shiftlab/metrics.hpp"
#include "shiftlab/proximity.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/scores.hpp"
#include "shiftlab/shiftpack.hpp"
#include "shiftlab/stats.hpp"
#include "shiftlab/synth.hpp"
#include "shiftlab/toynet.hpp"
