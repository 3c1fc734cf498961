#include "bvit/config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace bvit {

namespace {

using json = nlohmann::json;

std::size_t as_size(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  throw ConfigError(key, "expected a non-negative integer, got " + v.dump());
}

double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError(key, "expected a number, got " + v.dump());
  return v.get<double>();
}

bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) throw ConfigError(key, "expected true or false, got " + v.dump());
  return v.get<bool>();
}

std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key, "expected a string, got " + v.dump());
  return v.get<std::string>();
}

FfnKind as_ffn(const std::string& key, const json& v) {
  try {
    return parse_ffn_kind(as_string(key, v));
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError(key, e.what());
  }
}

using Setter = std::function<void(const std::string&, const json&)>;

std::map<std::string, Setter> model_setters(ViTConfig& c) {
  return {
      {"image_size", [&](auto& k, auto& v) { c.image_size = as_size(k, v); }},
      {"patch_size", [&](auto& k, auto& v) { c.patch_size = as_size(k, v); }},
      {"channels", [&](auto& k, auto& v) { c.channels = as_size(k, v); }},
      {"d_model", [&](auto& k, auto& v) { c.d_model = as_size(k, v); }},
      {"d_ff", [&](auto& k, auto& v) { c.d_ff = as_size(k, v); }},
      {"heads", [&](auto& k, auto& v) { c.n_heads = as_size(k, v); }},
      {"depth", [&](auto& k, auto& v) { c.depth = as_size(k, v); }},
      {"experts", [&](auto& k, auto& v) { c.n_experts = as_size(k, v); }},
      {"top_k", [&](auto& k, auto& v) { c.top_k = as_size(k, v); }},
      {"butterfly_layers", [&](auto& k, auto& v) { c.n_butterfly_layers = as_size(k, v); }},
      {"lambda_bal", [&](auto& k, auto& v) { c.lambda_bal = as_double(k, v); }},
      {"lambda_sp", [&](auto& k, auto& v) { c.lambda_sp = as_double(k, v); }},
      {"ffn", [&](auto& k, auto& v) { c.ffn_kind = as_ffn(k, v); }},
      {"classes", [&](auto& k, auto& v) { c.classes = as_size(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = as_size(k, v); }},
      {"spatial_2d", [&](auto& k, auto& v) { c.spatial_2d = as_bool(k, v); }},
      {"label_smoothing", [&](auto& k, auto& v) { c.label_smoothing = as_double(k, v); }},
  };
}

void apply(const json& j, std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(key, "unknown key");
    it->second(key, value);
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (schedule.epochs == 0) throw ConfigError("epochs", "must be positive");
  if (schedule.batch_size == 0) throw ConfigError("batch", "must be positive");
  if (!(schedule.peak_lr > 0)) throw ConfigError("lr", "must be positive");
  if (schedule.warmup_fraction < 0 || schedule.warmup_fraction >= 1) throw ConfigError("warmup", "must be in [0, 1)");
  if (schedule.weight_decay < 0) throw ConfigError("weight_decay", "must be non-negative");
  if (format != "csv" && format != "json") throw ConfigError("format", "expected csv or json, got '" + format + "'");
  if (data.rfind("synthetic:", 0) != 0 && data.rfind("cifar100:", 0) != 0)
    throw ConfigError("data", "expected cifar100:<dir> or synthetic:<spec>, got '" + data + "'");
}

nlohmann::ordered_json to_json(const ViTConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["channels"] = c.channels;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["heads"] = c.n_heads;
  j["depth"] = c.depth;
  j["experts"] = c.n_experts;
  j["top_k"] = c.top_k;
  j["butterfly_layers"] = c.n_butterfly_layers;
  j["lambda_bal"] = c.lambda_bal;
  j["lambda_sp"] = c.lambda_sp;
  j["ffn"] = to_string(c.ffn_kind);
  j["classes"] = c.classes;
  j["seed"] = c.seed;
  j["spatial_2d"] = c.spatial_2d;
  j["label_smoothing"] = c.label_smoothing;
  return j;
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  auto setters = model_setters(c);
  apply(j, setters);
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const RunConfig& r) {
  nlohmann::ordered_json j = to_json(r.model);
  j["epochs"] = r.schedule.epochs;
  j["batch"] = r.schedule.batch_size;
  j["lr"] = r.schedule.peak_lr;
  j["warmup"] = r.schedule.warmup_fraction;
  j["weight_decay"] = r.schedule.weight_decay;
  j["augment"] = r.schedule.augment;
  j["data"] = r.data;
  j["out"] = r.out_dir;
  j["format"] = r.format;
  j["standardize"] = r.standardize;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base) {
  RunConfig r = std::move(base);
  auto setters = model_setters(r.model);
  setters["classes"] = [&](auto& k, auto& v) { r.classes = as_size(k, v); };
  setters["seed"] = [&](auto& k, auto& v) { r.model.seed = r.schedule.seed = as_size(k, v); };
  setters["epochs"] = [&](auto& k, auto& v) { r.schedule.epochs = as_size(k, v); };
  setters["batch"] = [&](auto& k, auto& v) { r.schedule.batch_size = as_size(k, v); };
  setters["lr"] = [&](auto& k, auto& v) { r.schedule.peak_lr = as_double(k, v); };
  setters["warmup"] = [&](auto& k, auto& v) { r.schedule.warmup_fraction = as_double(k, v); };
  setters["weight_decay"] = [&](auto& k, auto& v) { r.schedule.weight_decay = as_double(k, v); };
  setters["augment"] = [&](auto& k, auto& v) { r.schedule.augment = as_bool(k, v); };
  setters["data"] = [&](auto& k, auto& v) { r.data = as_string(k, v); };
  setters["out"] = [&](auto& k, auto& v) { r.out_dir = as_string(k, v); };
  setters["format"] = [&](auto& k, auto& v) { r.format = as_string(k, v); };
  setters["standardize"] = [&](auto& k, auto& v) { r.standardize = as_bool(k, v); };
  apply(j, setters);
  if (r.classes) r.model.classes = *r.classes;
  return r;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

}  // namespace bvit
