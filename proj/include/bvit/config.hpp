#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "bvit/vit.hpp"

namespace bvit {

// Everything a command needs: model, schedule, data source and outputs.
// Serialized as one flat JSON object; unknown keys are rejected.
struct RunConfig {
  ViTConfig model;
  TrainSchedule schedule;
  std::string data = "synthetic:classes=4,train=512,val=128,seed=7";
  std::string out_dir;
  std::string format = "csv";
  bool standardize = true;  // CIFAR path; synthetic specs carry their own flag
  std::optional<std::size_t> classes;  // taken from the dataset when unset

  void validate() const;
};

nlohmann::ordered_json to_json(const ViTConfig& config);
ViTConfig vit_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const RunConfig& config);
// Applies the keys present in j on top of `base`.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace bvit
