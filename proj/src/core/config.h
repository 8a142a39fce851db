#pragma once

#include <map>
#include <string>
#include <vector>

namespace svcforge {

// Hierarchical key-value configuration. Sections hold string values; typed
// getters parse on access. Sources layer as: built-in profile defaults, then
// an optional INI-style file, then SVCFORGE_<SECTION>_<KEY> environment
// overrides.
class Config {
 public:
  Config() = default;

  // Built-in defaults for a profile ("desk" or "vits").
  static Config defaults(const std::string& profile);

  // Defaults + file overlay + environment overrides.
  static Config load_file(const std::string& path, const std::string& profile);

  // Rebuild from a dump() snapshot (env overrides are not re-applied).
  static Config from_snapshot(const std::string& text);

  void set(const std::string& section, const std::string& key,
           const std::string& value);
  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key) const;
  long long get_int(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key) const;
  std::vector<long long> get_int_list(const std::string& section,
                                      const std::string& key) const;
  std::vector<double> get_double_list(const std::string& section,
                                      const std::string& key) const;

  const std::string& profile() const { return profile_; }

  // Full snapshot, parseable by from_snapshot(); every key is materialized.
  std::string dump() const;

  void apply_env_overrides();

 private:
  void overlay_text(const std::string& text, const std::string& origin);

  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::string profile_ = "desk";
};

}  // namespace svcforge
