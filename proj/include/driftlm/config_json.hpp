#pragma once

#include <json.hpp>

#include "driftlm/trainer.hpp"

namespace driftlm {

nlohmann::ordered_json to_json(const TrainConfig& config);

// Missing keys keep the values of `defaults`; unknown keys raise InvalidInput.
TrainConfig train_config_from_json(const nlohmann::json& doc, const TrainConfig& defaults);

}  // namespace driftlm
