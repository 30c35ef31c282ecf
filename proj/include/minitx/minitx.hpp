#pragma once

#include "minitx/autodiff.hpp"
#include "minitx/baselines.hpp"
#include "minitx/context_test.hpp"
#include "minitx/error.hpp"
#include "minitx/eval.hpp"
#include "minitx/io.hpp"
#include "minitx/model.hpp"
#include "minitx/rng.hpp"
#include "minitx/simgen.hpp"
#include "minitx/trainer.hpp"
