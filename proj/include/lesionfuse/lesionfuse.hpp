#pragma once

#include "lesionfuse/tensor.hpp"
#include "lesionfuse/ops.hpp"
#include "lesionfuse/gradcheck.hpp"
#include "lesionfuse/nn.hpp"
#include "lesionfuse/backbones.hpp"
#include "lesionfuse/fault.hpp"
#include "lesionfuse/fusion.hpp"
#include "lesionfuse/metrics.hpp"
#include "lesionfuse/data.hpp"
#include "lesionfuse/optim.hpp"
#include "lesionfuse/experiment.hpp"
#include "lesionfuse/gradcheck_suite.hpp"
