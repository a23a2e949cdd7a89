// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mlprune/allocation.hpp"
#include "mlprune/calib_stats.hpp"
#include "mlprune/container.hpp"
#include "mlprune/core.hpp"
#include "mlprune/criteria.hpp"
#include "mlprune/mask.hpp"
#include "mlprune/masker.hpp"
#include "mlprune/model.hpp"
#include "mlprune/pipeline.hpp"
#include "mlprune/weights.hpp"
