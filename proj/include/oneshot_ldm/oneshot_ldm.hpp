// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "oneshot_ldm/attribution.hpp"
#include "oneshot_ldm/augment.hpp"
#include "oneshot_ldm/checkpoint.hpp"
#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/diffusion.hpp"
#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/evaluation.hpp"
#include "oneshot_ldm/experiment.hpp"
#include "oneshot_ldm/image_io.hpp"
#include "oneshot_ldm/rae.hpp"
#include "oneshot_ldm/regularizers.hpp"
#include "oneshot_ldm/render.hpp"
#include "oneshot_ldm/rng.hpp"
#include "oneshot_ldm/schedule.hpp"
#include "oneshot_ldm/statistics.hpp"
#include "oneshot_ldm/synthetic.hpp"
#include "oneshot_ldm/unet.hpp"
