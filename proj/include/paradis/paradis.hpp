#pragma once

#include "paradis/autodiff.hpp"
#include "paradis/bytes.hpp"
#include "paradis/calibration.hpp"
#include "paradis/checkpoint.hpp"
#include "paradis/complexity.hpp"
#include "paradis/config.hpp"
#include "paradis/coordinator.hpp"
#include "paradis/dataset.hpp"
#include "paradis/error.hpp"
#include "paradis/losses.hpp"
#include "paradis/masked_monolith.hpp"
#include "paradis/model.hpp"
#include "paradis/optimizer.hpp"
#include "paradis/planner.hpp"
#include "paradis/stats.hpp"
#include "paradis/switch_spec.hpp"
#include "paradis/tensor.hpp"
#include "paradis/trainer.hpp"
#include "paradis/worker.hpp"
#include "paradis/wire.hpp"
