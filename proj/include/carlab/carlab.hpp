#pragma once

#include "carlab/allocation.hpp"
#include "carlab/datagen.hpp"
#include "carlab/engine.hpp"
#include "carlab/errors.hpp"
#include "carlab/features.hpp"
#include "carlab/harness/analysis.hpp"
#include "carlab/harness/config.hpp"
#include "carlab/harness/experiment.hpp"
#include "carlab/harness/table.hpp"
#include "carlab/inference.hpp"
#include "carlab/normal.hpp"
#include "carlab/power_oracle.hpp"
#include "carlab/random.hpp"
