// Umbrella header.
#pragma once

#include "unigen/checkpoint.hpp"
#include "unigen/comoe.hpp"
#include "unigen/config.hpp"
#include "unigen/datagen.hpp"
#include "unigen/embeddings.hpp"
#include "unigen/eval.hpp"
#include "unigen/grad_check.hpp"
#include "unigen/metrics.hpp"
#include "unigen/png.hpp"
#include "unigen/training.hpp"
#include "unigen/weavenet.hpp"
