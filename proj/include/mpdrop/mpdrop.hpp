#pragma once

#include "mpdrop/arch.hpp"
#include "mpdrop/data.hpp"
#include "mpdrop/errors.hpp"
#include "mpdrop/experiment.hpp"
#include "mpdrop/layers.hpp"
#include "mpdrop/network.hpp"
#include "mpdrop/pooling.hpp"
#include "mpdrop/random.hpp"
#include "mpdrop/tensor.hpp"
