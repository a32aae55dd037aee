#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace driftlm {

struct CheckResult {
    std::string module;
    std::string name;
    bool passed = false;
    std::string detail;
};

using CheckObserver = std::function<void(const CheckResult&)>;

/// Runs every module invariant and oracle check on random instances drawn
/// from `seed`. `on_result` sees each result as soon as it is known.
std::vector<CheckResult> run_property_suite(std::uint64_t seed, const CheckObserver& on_result = {});

}  // namespace driftlm
