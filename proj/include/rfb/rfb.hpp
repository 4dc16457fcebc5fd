#pragma once

// Umbrella header for the RFB detector library.

#include "rfb/blocks.hpp"
#include "rfb/detector.hpp"
#include "rfb/erf.hpp"
#include "rfb/eval.hpp"
#include "rfb/gradcheck.hpp"
#include "rfb/image.hpp"
#include "rfb/model.hpp"
#include "rfb/nn.hpp"
#include "rfb/ops.hpp"
#include "rfb/synth.hpp"
#include "rfb/tensor.hpp"
#include "rfb/train.hpp"
