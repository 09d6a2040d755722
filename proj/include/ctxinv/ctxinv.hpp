#pragma once

#include "ctxinv/errors.hpp"
#include "ctxinv/token_space.hpp"
#include "ctxinv/model.hpp"
#include "ctxinv/pretrain.hpp"
#include "ctxinv/theory.hpp"
#include "ctxinv/dataset.hpp"
#include "ctxinv/lab.hpp"
#include "ctxinv/dynamics.hpp"
#include "ctxinv/svg.hpp"
#include "ctxinv/config.hpp"
#include "ctxinv/experiment.hpp"
