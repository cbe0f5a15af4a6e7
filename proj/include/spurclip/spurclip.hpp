#pragma once

#include "spurclip/bank.hpp"
#include "spurclip/boxes.hpp"
#include "spurclip/detection.hpp"
#include "spurclip/error.hpp"
#include "spurclip/losses.hpp"
#include "spurclip/manifest.hpp"
#include "spurclip/matrix.hpp"
#include "spurclip/metrics.hpp"
#include "spurclip/projection.hpp"
#include "spurclip/rng.hpp"
#include "spurclip/synth.hpp"
#include "spurclip/trainer.hpp"
