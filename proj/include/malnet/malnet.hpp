#pragma once

#include "malnet/error.hpp"
#include "malnet/tensor.hpp"
#include "malnet/kernels.hpp"
#include "malnet/autograd.hpp"
#include "malnet/model.hpp"
#include "malnet/image.hpp"
#include "malnet/data.hpp"
#include "malnet/train.hpp"
#include "malnet/eval.hpp"
#include "malnet/checkpoint.hpp"
#include "malnet/serve.hpp"
#include "malnet/config.hpp"
