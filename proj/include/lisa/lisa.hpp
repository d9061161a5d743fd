#pragma once

// Umbrella header.

#include "lisa/checkpoint.hpp"
#include "lisa/config.hpp"
#include "lisa/data.hpp"
#include "lisa/errors.hpp"
#include "lisa/harness.hpp"
#include "lisa/instrument.hpp"
#include "lisa/lora.hpp"
#include "lisa/model.hpp"
#include "lisa/optim.hpp"
#include "lisa/quad.hpp"
#include "lisa/rng.hpp"
#include "lisa/runlog.hpp"
#include "lisa/scheduler.hpp"
#include "lisa/sha256.hpp"
#include "lisa/tensor.hpp"
#include "lisa/trainer.hpp"
