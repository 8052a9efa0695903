#pragma once

#include <string>
#include <vector>

#include "nepa/config.hpp"

namespace nepa {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0;
  bool pass() const;
};

/// Every tape primitive on random f64 inputs, then the full loss of a small
/// model (T = 5) with respect to each parameter tensor, with and without
/// stop-grad. Under stop-grad the numeric side holds the targets fixed at
/// the unperturbed weights, which is the function the tape differentiates.
GradcheckReport run_gradcheck(const GradcheckConfig& cfg);

/// The model used for the end-to-end part: 8 x 40 images, patch 8.
BackboneConfig gradcheck_backbone(const GradcheckConfig& cfg);

}  // namespace nepa
