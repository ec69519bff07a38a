#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "motok/gradcheck.hpp"

namespace motok::gradsuite {

// One differentiable loss with a generator of seeded random instances.
struct LossCheck {
  std::string name;
  std::string module;
  std::function<nk::GradCheckReport(std::uint64_t seed)> run;
};

const std::vector<LossCheck>& registry();

struct CaseResult {
  std::string name;
  std::string module;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // largest relative error seen
  double seconds = 0.0;
  bool passed() const { return failures == 0 && instances > 0; }
};

// Runs every check whose name or module matches `filter` ("all" matches
// everything) on `instances` seeds. Throws std::invalid_argument when nothing
// matches.
std::vector<CaseResult> run(std::string_view filter, std::size_t instances = 20,
                            std::ostream* log = nullptr);

}  // namespace motok::gradsuite
