#pragma once

#include "selar/data_io.hpp"
#include "selar/dataset.hpp"
#include "selar/error.hpp"
#include "selar/evaluation.hpp"
#include "selar/model.hpp"
#include "selar/tensor.hpp"
#include "selar/training.hpp"
#include "selar/viz.hpp"
