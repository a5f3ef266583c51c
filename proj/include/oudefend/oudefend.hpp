#pragma once

#include "oudefend/errors.hpp"
#include "oudefend/tensor.hpp"
#include "oudefend/autodiff.hpp"
#include "oudefend/layers.hpp"
#include "oudefend/models.hpp"
#include "oudefend/attacks.hpp"
#include "oudefend/data.hpp"
#include "oudefend/training.hpp"
#include "oudefend/config.hpp"
#include "oudefend/checkpoint.hpp"
#include "oudefend/features.hpp"
#include "oudefend/gradcheck.hpp"
