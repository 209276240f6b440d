#include <catch2/catch_amalgamated.hpp>

#include "dclstm/gradcheck.hpp"

using namespace dclstm;

// Finite-difference oracle over the whole differentiable kernel set, 32-bit
// backward against the 64-bit central-difference reference and the 64-bit
// backward against the same reference.

TEST_CASE("finite-difference gradient suite") {
  for (const auto& name : gradcheck_kernels()) {
    DYNAMIC_SECTION("kernel " << name) {
      const GradCheckResult r = gradcheck_kernel(name, 3, 20240 + 17);
      INFO("kernel " << name << " f32 " << r.max_rel_err_f32 << " f64 " << r.max_rel_err_f64);
      CHECK(r.max_rel_err_f32 < kGradTol32);
      CHECK(r.max_rel_err_f64 < kGradTol64);
    }
  }
}
