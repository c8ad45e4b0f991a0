#pragma once

#include "cad/attention.hpp"
#include "cad/autodiff.hpp"
#include "cad/data.hpp"
#include "cad/errors.hpp"
#include "cad/evaluation.hpp"
#include "cad/matrix.hpp"
#include "cad/model.hpp"
#include "cad/recurrent.hpp"
#include "cad/training.hpp"
