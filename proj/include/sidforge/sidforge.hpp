#pragma once

#include "sidforge/baselines.hpp"
#include "sidforge/dataio.hpp"
#include "sidforge/dataset.hpp"
#include "sidforge/errors.hpp"
#include "sidforge/kmeans.hpp"
#include "sidforge/log.hpp"
#include "sidforge/losses.hpp"
#include "sidforge/methods.hpp"
#include "sidforge/metrics.hpp"
#include "sidforge/numerics.hpp"
#include "sidforge/optimizer.hpp"
#include "sidforge/parallel.hpp"
#include "sidforge/projection.hpp"
#include "sidforge/quantizer.hpp"
#include "sidforge/random.hpp"
#include "sidforge/synth.hpp"
#include "sidforge/trainer.hpp"
