#pragma once

// Frozen expected values for the acceptance suite.

// Mean top-40% rank overlap between probe-approximated normalized scores
// (10% hybrid probes) and the exact scores computed from the full attention
// matrix, over the 20 seeded peaked traces (seeds 1..20, dims 1x2x256x64).
// The exact-oracle run measured 0.877941; the run is deterministic, so the
// pin sits a hair below that to absorb last-ulp libm differences between
// toolchains without weakening the claim.
inline constexpr double kProbeOverlapThreshold = 0.8775;
