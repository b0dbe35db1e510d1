#pragma once

#include "vistr/checkpoint.hpp"
#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"
#include "vistr/localize.hpp"
#include "vistr/matching.hpp"
#include "vistr/metrics.hpp"
#include "vistr/nn.hpp"
#include "vistr/pnp.hpp"
#include "vistr/query.hpp"
#include "vistr/retrieval.hpp"
#include "vistr/scene.hpp"
#include "vistr/synthetic.hpp"
#include "vistr/train.hpp"
#include "vistr/vae.hpp"
