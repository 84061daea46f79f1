#pragma once

#include "relflow/config.hpp"
#include "relflow/dataset.hpp"
#include "relflow/external_judge.hpp"
#include "relflow/flow/checkpoint.hpp"
#include "relflow/flow/codec.hpp"
#include "relflow/flow/loss.hpp"
#include "relflow/flow/net.hpp"
#include "relflow/flow/optim.hpp"
#include "relflow/flow/pretrain.hpp"
#include "relflow/grpo.hpp"
#include "relflow/judge.hpp"
#include "relflow/metrics.hpp"
#include "relflow/poisson.hpp"
#include "relflow/sampler.hpp"
#include "relflow/scenegen.hpp"
