#pragma once

#include "effscale/checkpoint.hpp"
#include "effscale/config.hpp"
#include "effscale/growth.hpp"
#include "effscale/moe.hpp"
#include "effscale/savings.hpp"
#include "effscale/tensor.hpp"
#include "effscale/trainer.hpp"
#include "effscale/transformer.hpp"
