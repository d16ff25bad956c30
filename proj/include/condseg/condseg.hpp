#pragma once

// Umbrella header.

#include "condseg/augment.hpp"
#include "condseg/autodiff.hpp"
#include "condseg/backbone.hpp"
#include "condseg/cdfa.hpp"
#include "condseg/cdfa_reference.hpp"
#include "condseg/checkpoint.hpp"
#include "condseg/common.hpp"
#include "condseg/config.hpp"
#include "condseg/data.hpp"
#include "condseg/decoder.hpp"
#include "condseg/image_io.hpp"
#include "condseg/layers.hpp"
#include "condseg/losses.hpp"
#include "condseg/metrics.hpp"
#include "condseg/model.hpp"
#include "condseg/nn.hpp"
#include "condseg/param_store.hpp"
#include "condseg/rng.hpp"
#include "condseg/sid.hpp"
#include "condseg/tensor.hpp"
#include "condseg/train.hpp"
