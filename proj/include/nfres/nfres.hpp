#pragma once

#include "nfres/checkpoint.hpp"
#include "nfres/data.hpp"
#include "nfres/error.hpp"
#include "nfres/gradcheck.hpp"
#include "nfres/gradcheck_suite.hpp"
#include "nfres/init.hpp"
#include "nfres/layers.hpp"
#include "nfres/manifest.hpp"
#include "nfres/params.hpp"
#include "nfres/resnet.hpp"
#include "nfres/rng.hpp"
#include "nfres/sigprop.hpp"
#include "nfres/tensor.hpp"
#include "nfres/train.hpp"
