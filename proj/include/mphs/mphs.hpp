#pragma once

#include "mphs/analysis.hpp"
#include "mphs/closedloop.hpp"
#include "mphs/errors.hpp"
#include "mphs/integrate.hpp"
#include "mphs/metric.hpp"
#include "mphs/ocp.hpp"
#include "mphs/optimizer.hpp"
#include "mphs/phcore.hpp"
#include "mphs/resolvent.hpp"
#include "mphs/system.hpp"
