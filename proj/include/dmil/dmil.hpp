#pragma once

#include "dmil/batch.hpp"
#include "dmil/checkpoint.hpp"
#include "dmil/dataset.hpp"
#include "dmil/env.hpp"
#include "dmil/errors.hpp"
#include "dmil/models.hpp"
#include "dmil/nn.hpp"
#include "dmil/objectives.hpp"
#include "dmil/protocols.hpp"
#include "dmil/random.hpp"
#include "dmil/rollout.hpp"
#include "dmil/trainer.hpp"
#include "dmil/check.hpp"
