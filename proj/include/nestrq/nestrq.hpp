#pragma once

// Umbrella header: the whole pipeline in dependency order.

#include "nestrq/common.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"
#include "nestrq/io.hpp"
#include "nestrq/features.hpp"
#include "nestrq/corpus.hpp"
#include "nestrq/quantizer.hpp"
#include "nestrq/encoder.hpp"
#include "nestrq/objectives.hpp"
#include "nestrq/training.hpp"
#include "nestrq/run_config.hpp"
