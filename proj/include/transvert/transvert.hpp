#pragma once

// Convenience umbrella: the whole library in one include.

#include "transvert/common.hpp"
#include "transvert/volume.hpp"
#include "transvert/phantom.hpp"
#include "transvert/drr.hpp"
#include "transvert/tensor.hpp"
#include "transvert/conv_ops.hpp"
#include "transvert/nn.hpp"
#include "transvert/model.hpp"
#include "transvert/dataset.hpp"
#include "transvert/train.hpp"
#include "transvert/metrics.hpp"
#include "transvert/ablation.hpp"
#include "transvert/assemble.hpp"
#include "transvert/config.hpp"
