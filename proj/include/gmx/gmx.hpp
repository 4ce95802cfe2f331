#pragma once

#include "gmx/core.hpp"
#include "gmx/rng.hpp"
#include "gmx/gop.hpp"
#include "gmx/pool.hpp"
#include "gmx/mixup.hpp"
#include "gmx/scorer.hpp"
#include "gmx/adam.hpp"
#include "gmx/train.hpp"
#include "gmx/eval.hpp"
#include "gmx/io.hpp"
#include "gmx/synth.hpp"
#include "gmx/pipeline.hpp"
