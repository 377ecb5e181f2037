#pragma once

// Typed error hierarchy. Hard contract violations throw; recoverable
// degradations (rank clamps, seed reduction, memory misses) are reported
// through EpisodeLog instead.

#include <stdexcept>
#include <string>
#include <vector>

namespace pmcr {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define PMCR_DEFINE_ERROR(Name)                                        \
    struct Name : Error {                                              \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

PMCR_DEFINE_ERROR(MalformedHeader);
PMCR_DEFINE_ERROR(DimOverflow);
PMCR_DEFINE_ERROR(TruncatedPayload);
PMCR_DEFINE_ERROR(ZeroTargetDim);
PMCR_DEFINE_ERROR(DimMismatch);
PMCR_DEFINE_ERROR(RankTooLarge);
PMCR_DEFINE_ERROR(NonFiniteInput);
PMCR_DEFINE_ERROR(NonDifferentiablePoint);
PMCR_DEFINE_ERROR(EmptyForeground);
PMCR_DEFINE_ERROR(NonConvergence);
PMCR_DEFINE_ERROR(DegenerateMarginal);
PMCR_DEFINE_ERROR(DegenerateScores);
PMCR_DEFINE_ERROR(EvenKernel);
PMCR_DEFINE_ERROR(EmptyUnion);
PMCR_DEFINE_ERROR(NonFiniteComponent);
PMCR_DEFINE_ERROR(IndivisibleDims);
PMCR_DEFINE_ERROR(EmptyScan);
PMCR_DEFINE_ERROR(InvalidSpec);
PMCR_DEFINE_ERROR(NonFiniteLoss);

#undef PMCR_DEFINE_ERROR

// Collects non-fatal degradation events (clamped SVD rank, reduced SLIC
// seed count, missing memory classes) for the caller to inspect or print.
struct EpisodeLog {
    std::vector<std::string> events;
    void note(std::string msg) { events.push_back(std::move(msg)); }
    bool empty() const { return events.empty(); }
};

}  // namespace pmcr
