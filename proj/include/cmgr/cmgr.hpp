#pragma once

#include "cmgr/bnd.hpp"
#include "cmgr/checkpoint.hpp"
#include "cmgr/config.hpp"
#include "cmgr/encoders.hpp"
#include "cmgr/experiment.hpp"
#include "cmgr/metrics.hpp"
#include "cmgr/model.hpp"
#include "cmgr/pointset.hpp"
#include "cmgr/projection.hpp"
#include "cmgr/sagr.hpp"
#include "cmgr/tam.hpp"
#include "cmgr/trainer.hpp"
