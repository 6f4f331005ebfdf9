#pragma once

// Family-specific readers used by the replay container.

#include <cmath>

#include "fedbio/problems.hpp"

namespace fedbio::detail {

ClientPtr read_quadratic_client(BinaryReader& in);
ClientPtr read_data_cleaning_client(BinaryReader& in);
ClientPtr read_hyperrep_client(BinaryReader& in);

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace fedbio::detail
