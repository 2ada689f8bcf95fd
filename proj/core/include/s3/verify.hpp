#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace s3 {

/// One analysis check: name, verdict and a short human-readable detail line.
struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

// Individual checks. Each builds its own distributions from `seed`.

/// DPI on 200 random (Y, X, Z) chains, plus equality for Z = X and rejection
/// of a non-Markov joint.
CheckResult check_dpi(std::uint64_t seed = 0);
/// Exact I(X¹;X²) = H(X_S) within 1e-9 on uniform, skewed and degenerate specs.
CheckResult check_mi_exact();
/// Plug-in estimate within 0.05 nat of H(X_S) at 10⁵ samples.
CheckResult check_mi_plugin(std::uint64_t seed = 0);
/// XOR task: I(X;Y) − I(X_S;Y) = I(X_U;Y) = ln 2.
CheckResult check_cl_gap_xor();
/// Mixed task with a skewed unique factor: 0 < gap < I(X;Y) and gap ≥ I(X_U;Y).
CheckResult check_cl_gap_mixed();
/// max(log B − L_InfoNCE) ≤ I + 0.1 over 100 batches on 3 joints.
CheckResult check_infonce_bound(std::uint64_t seed = 0);
/// max(log B − L_SupCon) ≤ I(Z;Y) + 0.15 over 100 batches on 3 joints.
CheckResult check_supcon_bound(std::uint64_t seed = 0);
/// Entropy chain rule H(A,B) = H(A) + H(B|A) on random tables.
CheckResult check_chain_rule(std::uint64_t seed = 0);

/// Every check above, in order.
std::vector<CheckResult> analysis_checks(std::uint64_t seed = 0);

}  // namespace s3
