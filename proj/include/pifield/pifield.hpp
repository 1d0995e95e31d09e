#pragma once

#include "pifield/checkpoint.hpp"
#include "pifield/config.hpp"
#include "pifield/core/geometry.hpp"
#include "pifield/core/kernels.hpp"
#include "pifield/core/log.hpp"
#include "pifield/core/ops.hpp"
#include "pifield/core/optim.hpp"
#include "pifield/core/parallel.hpp"
#include "pifield/core/rng.hpp"
#include "pifield/core/tape.hpp"
#include "pifield/core/tensor.hpp"
#include "pifield/data.hpp"
#include "pifield/discriminator.hpp"
#include "pifield/eval.hpp"
#include "pifield/generator.hpp"
#include "pifield/io/image_io.hpp"
#include "pifield/renderer.hpp"
#include "pifield/tools.hpp"
#include "pifield/training.hpp"
