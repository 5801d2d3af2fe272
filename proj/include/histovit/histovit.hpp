#pragma once

#include "histovit/adam.hpp"
#include "histovit/attention_viz.hpp"
#include "histovit/data.hpp"
#include "histovit/error.hpp"
#include "histovit/evaluate.hpp"
#include "histovit/hvwt.hpp"
#include "histovit/image_io.hpp"
#include "histovit/metrics.hpp"
#include "histovit/ops.hpp"
#include "histovit/rng.hpp"
#include "histovit/run_config.hpp"
#include "histovit/tape.hpp"
#include "histovit/tensor.hpp"
#include "histovit/train.hpp"
#include "histovit/transforms.hpp"
#include "histovit/vit.hpp"
#include "histovit/vit_config.hpp"
