#pragma once

#include "tsvit/attention.hpp"
#include "tsvit/checkpoint.hpp"
#include "tsvit/counting.hpp"
#include "tsvit/data.hpp"
#include "tsvit/errors.hpp"
#include "tsvit/model.hpp"
#include "tsvit/ops.hpp"
#include "tsvit/platform.hpp"
#include "tsvit/rng.hpp"
#include "tsvit/run_config.hpp"
#include "tsvit/tensor.hpp"
#include "tsvit/train.hpp"
