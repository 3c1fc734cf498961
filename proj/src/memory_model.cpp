#include "bvit/memory_model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace bvit {

namespace {

std::size_t pow2_at_least(std::size_t n) {
  std::size_t p = 2;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

void ArchSpec::validate() const {
  if (d_model == 0 || d_ff == 0) throw ConfigError("d_model", "dimensions must be positive");
  if (n_butterfly_layers == 0) throw ConfigError("n_butterfly_layers", "must be positive");
  if (depth == 0) throw ConfigError("depth", "must be positive");
  if (!(bytes_per_angle > 0)) throw ConfigError("bytes_per_angle", "must be positive");
  if (!(substrate_bits_per_weight > 0)) throw ConfigError("substrate_bits_per_weight", "must be positive");
  if (!(standard_precision_bytes > 0)) throw ConfigError("standard_precision_bytes", "must be positive");
  if (standard_matrices_per_expert == 0) throw ConfigError("standard_matrices_per_expert", "must be positive");
}

ArchSpec ArchSpec::from_config(const ViTConfig& config) {
  ArchSpec s;
  s.d_model = config.d_model;
  s.d_ff = config.d_ff;
  s.n_experts = config.n_experts;
  s.n_butterfly_layers = config.n_butterfly_layers;
  s.depth = config.depth;
  return s;
}

double standard_moe_bytes(const ArchSpec& spec) {
  return static_cast<double>(spec.depth * spec.n_experts * spec.standard_matrices_per_expert * spec.d_ff *
                             spec.d_model) *
         spec.standard_precision_bytes;
}

double substrate_bytes(const ArchSpec& spec) {
  const double exact = spec.substrate_bits_per_weight / 8.0 * static_cast<double>(spec.d_ff * spec.d_model);
  return std::floor(exact + 1e-9);
}

double expert_angle_bytes(const ArchSpec& spec) {
  const double angles = static_cast<double>(spec.n_butterfly_layers * (pow2_at_least(spec.d_model) / 2 +
                                                                       pow2_at_least(spec.d_ff) / 2));
  return spec.bytes_per_angle * angles;
}

double butterfly_bytes(const ArchSpec& spec) {
  return static_cast<double>(spec.depth) *
         (substrate_bytes(spec) + static_cast<double>(spec.n_experts) * expert_angle_bytes(spec));
}

double compression_ratio(const ArchSpec& spec) { return standard_moe_bytes(spec) / butterfly_bytes(spec); }

double asymptotic_ratio(const ArchSpec& spec) {
  const double per_expert_standard = static_cast<double>(spec.standard_matrices_per_expert * spec.d_ff * spec.d_model) *
                                     spec.standard_precision_bytes;
  return per_expert_standard / expert_angle_bytes(spec);
}

double dram_energy(double bytes, double pj_per_bit) {
  if (bytes < 0) throw std::invalid_argument("dram_energy: bytes must be non-negative");
  return bytes * 8.0 * pj_per_bit * 1e-12;
}

MemoryReport memory_report(const ArchSpec& spec) {
  spec.validate();
  MemoryReport r;
  r.n_experts = spec.n_experts;
  r.standard_bytes = standard_moe_bytes(spec);
  r.butterfly_bytes = butterfly_bytes(spec);
  r.compression_ratio = r.standard_bytes / r.butterfly_bytes;
  r.asymptotic_ratio = asymptotic_ratio(spec);
  r.energy_joules_standard = dram_energy(r.standard_bytes);
  r.energy_joules_butterfly = dram_energy(r.butterfly_bytes);
  return r;
}

std::vector<MemoryReport> memory_sweep(ArchSpec spec, const std::vector<std::size_t>& n_experts) {
  std::vector<MemoryReport> rows;
  for (std::size_t n : n_experts) {
    spec.n_experts = n;
    rows.push_back(memory_report(spec));
  }
  return rows;
}

std::string format_mb(double bytes, int decimals) {
  if (decimals < 0 || decimals > 6) throw std::invalid_argument("format_mb: decimals must be in [0, 6]");
  std::uint64_t scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  // Integer arithmetic on whole bytes so truncation is exact.
  const auto whole = static_cast<std::uint64_t>(std::floor(bytes + 1e-6));
  const std::uint64_t units = whole / (1000000 / scale);
  char buf[64];
  if (decimals == 0)
    std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(units));
  else
    std::snprintf(buf, sizeof buf, "%llu.%0*llu", static_cast<unsigned long long>(units / scale), decimals,
                  static_cast<unsigned long long>(units % scale));
  return buf;
}

FitResult max_experts_fit(const ArchSpec& spec, const DeviceProfile& device) {
  spec.validate();
  if (device.memory_budget_bytes == 0) throw ConfigError("memory_budget_bytes", "must be positive");
  const double budget = static_cast<double>(device.memory_budget_bytes);
  auto largest = [&](auto bytes_for) -> std::size_t {
    ArchSpec s = spec;
    auto fits = [&](std::size_t n) {
      s.n_experts = n;
      return bytes_for(s) <= budget;
    };
    if (!fits(0)) return 0;
    std::size_t lo = 0, hi = 1;
    while (fits(hi)) {
      lo = hi;
      hi *= 2;
    }
    while (hi - lo > 1) {
      const std::size_t mid = lo + (hi - lo) / 2;
      (fits(mid) ? lo : hi) = mid;
    }
    return lo;
  };
  return {largest([](const ArchSpec& s) { return butterfly_bytes(s); }),
          largest([](const ArchSpec& s) { return standard_moe_bytes(s); })};
}

std::vector<DeviceProfile> load_device_profiles(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open device profiles " + path.string());
  const nlohmann::json doc = nlohmann::json::parse(in);
  std::vector<DeviceProfile> out;
  for (const auto& d : doc.at("devices")) {
    DeviceProfile p{d.at("name").get<std::string>(), d.at("memory_budget_bytes").get<std::uint64_t>(),
                    d.value("source", std::string{})};
    if (p.memory_budget_bytes == 0) throw ConfigError("memory_budget_bytes", "device '" + p.name + "' has zero budget");
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string report_csv(const std::vector<MemoryReport>& rows) {
  std::ostringstream os;
  os << "N_E,standard_MB,butterfly_MB,ratio,energy_mJ_standard,energy_mJ_butterfly\n";
  for (const auto& r : rows)
    os << r.n_experts << ',' << format_mb(r.standard_bytes, kStandardMbDecimals) << ','
       << format_mb(r.butterfly_bytes, kButterflyMbDecimals) << ','
       << fixed(r.compression_ratio, 3) << ',' << fixed(r.energy_joules_standard * 1e3, 3) << ','
       << fixed(r.energy_joules_butterfly * 1e3, 3) << '\n';
  return os.str();
}

std::string report_json(const std::vector<MemoryReport>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["N_E"] = r.n_experts;
    o["standard_MB"] = format_mb(r.standard_bytes, kStandardMbDecimals);
    o["butterfly_MB"] = format_mb(r.butterfly_bytes, kButterflyMbDecimals);
    o["ratio"] = std::round(r.compression_ratio * 1000.0) / 1000.0;
    o["energy_mJ_standard"] = std::round(r.energy_joules_standard * 1e6) / 1000.0;
    o["energy_mJ_butterfly"] = std::round(r.energy_joules_butterfly * 1e6) / 1000.0;
    arr.push_back(o);
  }
  return arr.dump(2) + "\n";
}

Census analytic_census(const ViTConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff, e = c.n_experts, depth = c.depth;
  const std::size_t g = c.image_size / c.patch_size;
  const std::size_t tokens = g * g + 1;
  Census out;
  out[group::kEmbeddings] = d * c.patch_dim() + d + d + tokens * d;
  out[group::kAttention] = depth * (3 * d * d + 3 * d + d * d + d);
  out[group::kNorm] = depth * 4 * d + 2 * d;
  out[group::kHead] = c.classes * d + c.classes;
  switch (c.ffn_kind) {
    case FfnKind::orbital:
      out[group::kGate] = depth * e * d;
      out[group::kAngles] = depth * e * c.n_butterfly_layers * (pow2_at_least(d) / 2 + pow2_at_least(ff) / 2);
      out[group::kSubstrate] = depth * ff * d;
      out[group::kDownProj] = depth * d * ff;
      break;
    case FfnKind::standard_moe:
      out[group::kGate] = depth * e * d;
      out[group::kExpertUp] = depth * e * ff * d;
      out[group::kExpertDown] = depth * e * d * ff;
      break;
    case FfnKind::dense:
      out[group::kFfnUp] = depth * ff * d;
      out[group::kFfnDown] = depth * d * ff;
      break;
  }
  return out;
}

std::string ConsistencyReport::describe() const {
  if (ok()) return "census consistent";
  std::ostringstream os;
  os << "census mismatch:";
  for (const auto& m : mismatches)
    os << ' ' << m.group << " (analytic " << m.analytic << ", measured " << m.measured << ", delta " << m.delta()
       << ")";
  return os.str();
}

ConsistencyReport census_consistency(const Census& measured, const ViTConfig& config) {
  const Census analytic = analytic_census(config);
  std::set<std::string> groups;
  for (const auto& [k, v] : analytic) groups.insert(k);
  for (const auto& [k, v] : measured) groups.insert(k);
  auto lookup = [](const Census& c, const std::string& k) -> long long {
    const auto it = c.find(k);
    return it == c.end() ? 0 : static_cast<long long>(it->second);
  };
  ConsistencyReport r;
  for (const auto& k : groups) {
    CensusDelta delta{k, lookup(analytic, k), lookup(measured, k)};
    if (delta.delta() != 0) r.mismatches.push_back(delta);
  }
  return r;
}

void require_consistent(const Census& measured, const ViTConfig& config) {
  const ConsistencyReport r = census_consistency(measured, config);
  if (!r.ok()) throw ConsistencyError(r.describe());
}

}  // namespace bvit
