#pragma once

#include "m2iv/common.hpp"
#include "m2iv/config.hpp"
#include "m2iv/micromodel.hpp"
#include "m2iv/dataset.hpp"
#include "m2iv/tasks.hpp"
#include "m2iv/optim.hpp"
#include "m2iv/pretrain.hpp"
#include "m2iv/intervention.hpp"
#include "m2iv/theory.hpp"
#include "m2iv/datapipe.hpp"
#include "m2iv/distill.hpp"
#include "m2iv/vlibrary.hpp"
#include "m2iv/evaluate.hpp"
#include "m2iv/baselines.hpp"
#include "m2iv/harness.hpp"
