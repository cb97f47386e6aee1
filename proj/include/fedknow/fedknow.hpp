#pragma once

#include "fedknow/check.hpp"
#include "fedknow/config.hpp"
#include "fedknow/data.hpp"
#include "fedknow/experiment.hpp"
#include "fedknow/fed.hpp"
#include "fedknow/knowledge.hpp"
#include "fedknow/linalg.hpp"
#include "fedknow/log.hpp"
#include "fedknow/metrics.hpp"
#include "fedknow/nn.hpp"
#include "fedknow/regression.hpp"
