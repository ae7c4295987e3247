#pragma once

#include "ddr/checkpoint.hpp"
#include "ddr/config.hpp"
#include "ddr/corpus.hpp"
#include "ddr/encoder.hpp"
#include "ddr/experiment.hpp"
#include "ddr/grad_check.hpp"
#include "ddr/loss.hpp"
#include "ddr/model.hpp"
#include "ddr/ops.hpp"
#include "ddr/optim.hpp"
#include "ddr/prefix_bank.hpp"
#include "ddr/random.hpp"
#include "ddr/retrieval.hpp"
#include "ddr/routing.hpp"
#include "ddr/serialize.hpp"
#include "ddr/tensor.hpp"
#include "ddr/training.hpp"
