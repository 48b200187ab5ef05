#pragma once

#include "diffnea/autodiff.hpp"
#include "diffnea/dynamics.hpp"
#include "diffnea/eval.hpp"
#include "diffnea/inertia.hpp"
#include "diffnea/io.hpp"
#include "diffnea/learn.hpp"
#include "diffnea/metrics.hpp"
#include "diffnea/model.hpp"
#include "diffnea/params.hpp"
#include "diffnea/simgen.hpp"
#include "diffnea/spatial.hpp"
#include "diffnea/trajectory.hpp"
