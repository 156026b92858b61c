#pragma once

// Umbrella header.

#include "common.hpp"
#include "tensor.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "backbone.hpp"
#include "stream.hpp"
#include "data_io.hpp"
#include "checkpoint.hpp"
#include "attribution.hpp"
#include "metrics.hpp"
#include "train.hpp"
