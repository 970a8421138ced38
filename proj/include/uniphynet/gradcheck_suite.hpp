#pragma once

#include "uniphynet/nn/gradcheck.hpp"

#include <string>
#include <vector>

namespace uniphynet {

struct GradSuiteEntry {
  std::string name;
  double threshold = 1e-4;
  double max_rel_error = 0;  // worst over seeds
  nn::Index coords_checked = 0;
  nn::Index kinks = 0;  // coordinates left out because their stencil straddles a kink
  double seconds = 0;

  bool passed() const { return coords_checked > 0 && max_rel_error < threshold; }
};

struct GradSuiteOptions {
  int seeds = 5;
  std::uint64_t base_seed = 2024;
  // Coordinates probed per parameter tensor in the end-to-end network check.
  nn::Index network_coords_per_tensor = 6;
  bool include_network = true;
};

// Every nn layer and model block (1e-4) plus the tiny unimodal network with
// its cross-entropy loss (1e-3), all in double precision.
std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& options = {});

}  // namespace uniphynet
