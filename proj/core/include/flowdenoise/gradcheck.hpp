#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fdn::gradcheck {

struct CheckRow {
  std::string name;
  double max_rel_err = 0.0;
  size_t n_checked = 0;
};

struct Report {
  std::vector<CheckRow> rows;
  double max_rel_err = 0.0;
  std::string worst;

  bool pass(double threshold = 1e-4) const { return max_rel_err < threshold; }
};

// Central finite differences against the tape for every dense primitive plus
// the end-to-end NLL of a tiny double-precision flow. `corruption` is a test
// hook that perturbs one end-to-end gradient entry so the suite must fail;
// 0 disables it.
Report run_suite(uint64_t seed, double corruption = 0.0);

}  // namespace fdn::gradcheck
