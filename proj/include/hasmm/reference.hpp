#pragma once

#include "hasmm/model.hpp"

namespace hasmm {

// Fixed instances shared by the self-test, unit tests and acceptance experiments.

// Three states, two well-separated streams, one transient state whose exit drifts towards the
// catastrophic state with duration.
ParameterSet reference_params();

// Two transient states, one stream, duration-dependent exits. Small enough for enumeration.
ParameterSet toy_params();

// Exponential sojourns and constant transitions with `transient` transient states.
ParameterSet ctmc_params(int transient);

}  // namespace hasmm
