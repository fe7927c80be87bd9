#pragma once

#include "advprune/attacks.hpp"
#include "advprune/bullet.hpp"
#include "advprune/config.hpp"
#include "advprune/dataset_io.hpp"
#include "advprune/diffcore.hpp"
#include "advprune/experiment.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "advprune/selection.hpp"
#include "advprune/trainer.hpp"
