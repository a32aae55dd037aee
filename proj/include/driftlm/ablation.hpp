#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "driftlm/trainer.hpp"

namespace driftlm {

enum class AblationAxis { Lift, Objective, QueueSize, AttRepRatio, TemperatureSet, Eta };

std::string to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(const std::string& text);

// Value syntax per axis:
//   lift             soft | hard-st
//   objective        feature-l2 | mirror-kl | mirror-mse | base, optional "+base" suffix
//   queue_size       positive integer
//   att_rep_ratio    "w_plus:w_minus", e.g. 1:1 or 0:1
//   temperature_set  slash-separated temperatures, e.g. 0.02/0.05/0.2
//   eta              positive real (mirror step)
TrainConfig apply_axis_value(const TrainConfig& base, AblationAxis axis, const std::string& value);

struct AblationCell {
    std::string value;
    std::uint64_t seed = 0;
    EvalReport report;
};

struct AblationRow {
    std::string value;
    // Indexed like AblationTable::nfes. SD is the sample SD over seeds, 0 for one seed.
    std::vector<double> gen_ppl_mean, gen_ppl_sd, entropy_mean, entropy_sd;
};

struct AblationTable {
    AblationAxis axis = AblationAxis::Lift;
    std::vector<int> nfes;
    std::vector<AblationRow> rows;
    std::vector<AblationCell> cells;

    std::string to_csv() const;
};

// Sample mean and SD; SD is 0 for a single value.
std::pair<double, double> mean_sd(const std::vector<double>& xs);

/// One train_run per (value, seed) starting from `init`; the run seed and
/// the evaluation seed are both the cell's seed.
AblationTable ablate(AblationAxis axis, const std::vector<std::string>& grid, const TrainConfig& base_config,
                     const std::vector<std::uint64_t>& seeds, const MarkovSource& source, const Checkpoint& init,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace driftlm
