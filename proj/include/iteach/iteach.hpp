#pragma once

#include "iteach/error.hpp"
#include "iteach/rng.hpp"
#include "iteach/tensor.hpp"
#include "iteach/gradcheck.hpp"
#include "iteach/nn.hpp"
#include "iteach/optim.hpp"
#include "iteach/ecce.hpp"
#include "iteach/mixers.hpp"
#include "iteach/data.hpp"
#include "iteach/masking.hpp"
#include "iteach/model.hpp"
#include "iteach/eval.hpp"
#include "iteach/training.hpp"
#include "iteach/protocols.hpp"
#include "iteach/config.hpp"
#include "iteach/gradcheck_suite.hpp"
