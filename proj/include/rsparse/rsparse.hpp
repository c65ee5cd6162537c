// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rsparse/detection.hpp"
#include "rsparse/geometry.hpp"
#include "rsparse/interaction.hpp"
#include "rsparse/io.hpp"
#include "rsparse/losses.hpp"
#include "rsparse/matching.hpp"
#include "rsparse/metrics.hpp"
#include "rsparse/optim.hpp"
#include "rsparse/oracle.hpp"
#include "rsparse/pooling.hpp"
#include "rsparse/synthetic.hpp"
#include "rsparse/training.hpp"
