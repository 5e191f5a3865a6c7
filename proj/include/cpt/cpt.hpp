#pragma once

// Everything in one include.

#include "cpt/alloc.hpp"
#include "cpt/augment.hpp"
#include "cpt/checkpoint.hpp"
#include "cpt/data.hpp"
#include "cpt/errors.hpp"
#include "cpt/gradcheck.hpp"
#include "cpt/graph.hpp"
#include "cpt/kv.hpp"
#include "cpt/layers.hpp"
#include "cpt/model.hpp"
#include "cpt/ops.hpp"
#include "cpt/params.hpp"
#include "cpt/random.hpp"
#include "cpt/tensor.hpp"
#include "cpt/train.hpp"
#include "cpt/trainer.hpp"
