#pragma once

// Analytical expert-memory, compression, DRAM-energy and device-fit model.
// MB is 10^6 bytes throughout. Expert memory covers the FFN experts only;
// the shared down-projection and the gate belong to the backbone.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "bvit/params.hpp"
#include "bvit/vit.hpp"

namespace bvit {

struct ArchSpec {
  std::size_t d_model = 256;
  std::size_t d_ff = 1024;
  std::size_t n_experts = 8;
  std::size_t n_butterfly_layers = 2;
  std::size_t depth = 7;
  double bytes_per_angle = 4;
  double substrate_bits_per_weight = 1.58;
  double standard_precision_bytes = 4;
  std::size_t standard_matrices_per_expert = 2;

  void validate() const;
  static ArchSpec from_config(const ViTConfig& config);
};

struct DeviceProfile {
  std::string name;
  std::uint64_t memory_budget_bytes = 0;
  std::string source;
};

struct MemoryReport {
  std::size_t n_experts = 0;
  double standard_bytes = 0;
  double butterfly_bytes = 0;
  double compression_ratio = 0;
  double asymptotic_ratio = 0;
  double energy_joules_standard = 0;
  double energy_joules_butterfly = 0;
};

inline constexpr double kDramPicojoulesPerBit = 6.4;

double standard_moe_bytes(const ArchSpec& spec);
// Per-layer substrate bytes at the theoretical bit width, in whole bytes
// (the fractional byte is dropped: 51,773 for the default layer).
double substrate_bytes(const ArchSpec& spec);
// Angle bytes of one expert in one layer.
double expert_angle_bytes(const ArchSpec& spec);
double butterfly_bytes(const ArchSpec& spec);
double compression_ratio(const ArchSpec& spec);
double asymptotic_ratio(const ArchSpec& spec);
double dram_energy(double bytes, double pj_per_bit = kDramPicojoulesPerBit);

MemoryReport memory_report(const ArchSpec& spec);
std::vector<MemoryReport> memory_sweep(ArchSpec spec, const std::vector<std::size_t>& n_experts);
inline const std::vector<std::size_t> kTableExpertCounts{2, 4, 8, 16, 32, 64};

// Megabytes truncated (not rounded) to `decimals` places, e.g. "0.649".
std::string format_mb(double bytes, int decimals = 3);
// Columns of the memory table keep the precision of the published table:
// two decimals for the standard layout, three for the butterfly layout.
inline constexpr int kStandardMbDecimals = 2;
inline constexpr int kButterflyMbDecimals = 3;

struct FitResult {
  std::size_t butterfly_experts = 0;
  std::size_t standard_experts = 0;
};

// Largest N_E whose total expert memory fits in the budget, for both layouts.
FitResult max_experts_fit(const ArchSpec& spec, const DeviceProfile& device);

std::vector<DeviceProfile> load_device_profiles(const std::filesystem::path& path);

std::string report_csv(const std::vector<MemoryReport>& rows);
std::string report_json(const std::vector<MemoryReport>& rows);

// Parameter counts per group derived from the configuration alone.
Census analytic_census(const ViTConfig& config);

struct CensusDelta {
  std::string group;
  long long analytic = 0;
  long long measured = 0;
  long long delta() const noexcept { return measured - analytic; }
};

struct ConsistencyReport {
  std::vector<CensusDelta> mismatches;
  bool ok() const noexcept { return mismatches.empty(); }
  std::string describe() const;
};

class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ConsistencyReport census_consistency(const Census& measured, const ViTConfig& config);
// Throws ConsistencyError listing every mismatching group.
void require_consistent(const Census& measured, const ViTConfig& config);

}  // namespace bvit
