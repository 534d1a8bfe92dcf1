#pragma once

#include "saeuron/activation_store.hpp"
#include "saeuron/checkpoint.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/feature_scoring.hpp"
#include "saeuron/loss.hpp"
#include "saeuron/probes.hpp"
#include "saeuron/sae.hpp"
#include "saeuron/synthetic.hpp"
#include "saeuron/train.hpp"
#include "saeuron/train_config.hpp"
#include "saeuron/unlearn.hpp"
