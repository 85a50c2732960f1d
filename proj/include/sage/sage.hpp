#pragma once

#include "sage/common.hpp"
#include "sage/topology.hpp"
#include "sage/simulator.hpp"
#include "sage/dataset.hpp"
#include "sage/nn.hpp"
#include "sage/gvae.hpp"
#include "sage/checkpoint.hpp"
#include "sage/rca.hpp"
#include "sage/actuator.hpp"
#include "sage/bench.hpp"
