#pragma once

#include "ctsev/error.hpp"
#include "ctsev/eval.hpp"
#include "ctsev/nn/conv3d.hpp"
#include "ctsev/nn/layers.hpp"
#include "ctsev/nn/network.hpp"
#include "ctsev/pipeline.hpp"
#include "ctsev/preprocess.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/synth.hpp"
#include "ctsev/tensor.hpp"
#include "ctsev/train.hpp"
#include "ctsev/volio.hpp"
