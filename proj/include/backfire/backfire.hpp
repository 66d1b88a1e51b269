#pragma once

#include "backfire/error.hpp"
#include "backfire/random.hpp"
#include "backfire/nn_core.hpp"
#include "backfire/io.hpp"
#include "backfire/datasets.hpp"
#include "backfire/attack.hpp"
#include "backfire/training.hpp"
#include "backfire/defenses.hpp"
#include "backfire/game_metrics.hpp"
#include "backfire/theorem_oracle.hpp"
#include "backfire/experiment.hpp"
