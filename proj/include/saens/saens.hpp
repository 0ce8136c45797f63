#pragma once

#include "saens/common.hpp"
#include "saens/activation_data.hpp"
#include "saens/sae.hpp"
#include "saens/train.hpp"
#include "saens/ensemble.hpp"
#include "saens/metrics.hpp"
#include "saens/checkpoint.hpp"
#include "saens/logistic.hpp"
#include "saens/downstream.hpp"
#include "saens/reports.hpp"
#include "saens/config.hpp"
#include "saens/pipeline.hpp"
