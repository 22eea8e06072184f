#pragma once

#include "attfuse/attention.hpp"
#include "attfuse/config.hpp"
#include "attfuse/data.hpp"
#include "attfuse/errors.hpp"
#include "attfuse/finite_diff.hpp"
#include "attfuse/graph.hpp"
#include "attfuse/image.hpp"
#include "attfuse/layers.hpp"
#include "attfuse/model.hpp"
#include "attfuse/ops.hpp"
#include "attfuse/preprocess.hpp"
#include "attfuse/tensor.hpp"
#include "attfuse/trainer.hpp"
