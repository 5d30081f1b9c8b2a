#pragma once

#include "dslmm/anova.hpp"
#include "dslmm/data.hpp"
#include "dslmm/design.hpp"
#include "dslmm/diagnostics.hpp"
#include "dslmm/experiments.hpp"
#include "dslmm/grouping.hpp"
#include "dslmm/lmm.hpp"
#include "dslmm/manova.hpp"
#include "dslmm/rng.hpp"
#include "dslmm/simulate.hpp"
#include "dslmm/stats.hpp"
#include "dslmm/svg.hpp"
