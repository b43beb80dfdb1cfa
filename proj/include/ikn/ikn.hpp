#pragma once

#include "core.hpp"
#include "potentials.hpp"
#include "dynamics.hpp"
#include "ensemble.hpp"
#include "kernel.hpp"
#include "fields.hpp"
#include "balance.hpp"
#include "config.hpp"
#include "io.hpp"
#include "checks.hpp"
