#pragma once

// Everything at once.

#include "loopsoup/rng.hpp"
#include "loopsoup/stats.hpp"
#include "loopsoup/engine.hpp"
#include "loopsoup/lattice.hpp"
#include "loopsoup/lattice_soup.hpp"
#include "loopsoup/gff.hpp"
#include "loopsoup/brownian.hpp"
#include "loopsoup/raster.hpp"
#include "loopsoup/observables.hpp"
#include "loopsoup/clusters.hpp"
#include "loopsoup/config.hpp"
#include "loopsoup/acceptance.hpp"
