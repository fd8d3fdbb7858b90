#pragma once

#include "eees/common.hpp"
#include "eees/random.hpp"
#include "eees/numerics.hpp"
#include "eees/losses.hpp"
#include "eees/synthdata.hpp"
#include "eees/model.hpp"
#include "eees/evaluator.hpp"
#include "eees/trainer.hpp"
#include "eees/gradcheck.hpp"
#include "eees/config.hpp"
#include "eees/commands.hpp"
