#pragma once

#include "slyolo/blocks.hpp"
#include "slyolo/checkpoint.hpp"
#include "slyolo/complexity.hpp"
#include "slyolo/config.hpp"
#include "slyolo/data.hpp"
#include "slyolo/evalkit.hpp"
#include "slyolo/loss.hpp"
#include "slyolo/model.hpp"
#include "slyolo/train.hpp"
