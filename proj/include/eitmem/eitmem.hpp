#pragma once

#include <eitmem/core.hpp>
#include <eitmem/spectrum.hpp>
#include <eitmem/spectral_ensemble.hpp>
#include <eitmem/atom_dynamics.hpp>
#include <eitmem/sequence.hpp>
#include <eitmem/fit.hpp>
#include <eitmem/decoherence.hpp>
#include <eitmem/propagation.hpp>
#include <eitmem/analysis.hpp>
#include <eitmem/io.hpp>
