#pragma once

#include <map>
#include <optional>
#include <string>

#include "kmslam/pipeline.hpp"
#include "kmslam/sim_world.hpp"

namespace kmslam {

/// Flat key = value text, '#' comments. Later keys override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_text(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Applies recognized keys (tau_d, tau_m, tau_b, tau_k, tau_c and the other
/// documented parameters) onto the params struct; unknown keys are ignored.
void apply_config(const KeyValueConfig& config, PipelineParams* params);
void apply_config(const KeyValueConfig& config, WorldConfig* world);

}  // namespace kmslam
