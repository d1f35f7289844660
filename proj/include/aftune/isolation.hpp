#pragma once

#include <filesystem>
#include <iosfwd>

#include "aftune/verifier.hpp"

namespace aftune {

/// Verifier entry point for the isolated process: reads one serialized request
/// from `in`, writes the JSON report to `out`. Returns the process exit status.
int serve_verifier(std::istream& in, std::ostream& out, const VerifierConfig& cfg = {});

/// Runs the verifier in a separate process (`exe verifier-serve`) that sees only
/// the block-scoped request bytes. Throws Error when the child misbehaves.
VerificationReport verify_isolated(const VerificationRequest& req,
                                   const std::filesystem::path& exe,
                                   const VerifierConfig& cfg = {});

/// Path of the running executable.
std::filesystem::path self_executable();

}  // namespace aftune
