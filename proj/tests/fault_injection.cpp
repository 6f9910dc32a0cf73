// Built with HETEROTUNE_FAULT_FUSE_PERTURB: adapter_fuse nudges one fused
// entry by 1e-6, so the fusion-equivalence check must notice and cmd_verify
// must report a failure. Guards the checks against silently passing.
#include <gtest/gtest.h>

#include "heterotune/verify.hpp"

#ifndef HETEROTUNE_FAULT_FUSE_PERTURB
#error "fault_injection must be compiled with HETEROTUNE_FAULT_FUSE_PERTURB"
#endif

using namespace heterotune;

TEST(FaultInjection, FusionCheckCatchesThePerturbation) {
    const CheckResult r = checks::fusion_equivalence();
    EXPECT_FALSE(r.pass) << "perturbed fusion slipped past the check: " << r.detail;
    EXPECT_GT(checks::fusion_sweep_max_err(10, 7), 1e-7);
}

TEST(FaultInjection, VerifyCommandReportsFailure) {
    ::testing::internal::CaptureStdout();
    const int rc = cmd_verify();
    const std::string out = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(rc, 1);
    EXPECT_NE(out.find("FAIL"), std::string::npos);
    EXPECT_NE(out.find("fusion-equivalence"), std::string::npos);
}
