#pragma once

#include "dicap/matrix.hpp"
#include "dicap/autograd.hpp"
#include "dicap/optim.hpp"
#include "dicap/rng.hpp"
#include "dicap/model.hpp"
#include "dicap/calibration.hpp"
#include "dicap/thresholding.hpp"
#include "dicap/losses.hpp"
#include "dicap/data.hpp"
#include "dicap/metrics.hpp"
#include "dicap/trainer.hpp"
#include "dicap/eval.hpp"
