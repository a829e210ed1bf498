#pragma once

// Umbrella header.
#include "anchors.hpp"
#include "backbone.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "detector.hpp"
#include "error.hpp"
#include "evalbench.hpp"
#include "geometry.hpp"
#include "ground_truth.hpp"
#include "model.hpp"
#include "rpn.hpp"
#include "run.hpp"
#include "synthdata.hpp"
#include "tensor.hpp"
#include "training.hpp"
