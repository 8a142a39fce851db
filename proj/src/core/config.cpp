#include "core/config.h"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "core/error.h"

extern char** environ;

namespace svcforge {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

const char* kBaseDefaults = R"(
[audio]
sample_rate = 24000
n_fft = 1024
hop_length = 240
win_length = 1024
n_mels = 80
mel_fmin = 0
mel_fmax = 12000
log_floor = 1e-5

[pitch]
fmin = 50
fmax = 1100
bins = 256
yin_threshold = 0.15
f0_shift_domain = log
f0_shift_mode = variance

[perturb]
formant_ratio_low = 0.7142857142857143
formant_ratio_high = 1.4
pitch_semitones = 12
peq_bands = 8
peq_gain_db = 12
speed_low = 0.8
speed_high = 1.25
perturb_once = false
perturb_at_inference = false

[content]
encoder = mock
dim = 1024
encoder_layer = 20
mock_hop_seconds = 0.02
mock_seed = 1337
extractor_cmd =

[pbtc]
bins = 256
branches = 10
filters = 256
kernel = 3
dilations = 1 2 3 4 5 6 7 8 9 10
time_project = truncate

[model]
latent_channels = 64
hidden_channels = 64
posterior_layers = 4
posterior_kernel = 5
prior_layers = 2
prior_heads = 2
prior_ffn_mult = 4
flow_blocks = 2
flow_wn_layers = 2
flow_kernel = 5
speaker_dim = 32
decoder_initial_channels = 96
upsample_rates = 8 6 5
upsample_kernels = 16 12 15
resblock_kernel = 3
resblock_dilations = 1 3
excitation_amplitude = 0.1
excitation_noise_std = 0.003
condition_posterior = true
condition_flow = true
condition_decoder = true
prior_temperature = 0.667
mpd_periods = 2 3 5 7 11
msd_scales = 1 2 4

[losses]
mel_weight = 1
kl_weight = 1
use_feature_matching = false
feature_matching_weight = 2
wreg_scope = generator

[training]
learning_rate = 1e-4
adam_beta1 = 0.8
adam_beta2 = 0.99
lr_decay = 1.0
batch_size = 2
segment_samples = 8192
warmup_steps = 50
pretrain_steps = 50
adapt_steps = 50
wreg_lambda = 1e-3
checkpoint_every = 100
log_every = 1
reset_discriminator_per_stage = false
cache_features = true
)";

const char* kVitsOverlay = R"(
[model]
latent_channels = 192
hidden_channels = 192
posterior_layers = 16
prior_layers = 6
flow_blocks = 4
flow_wn_layers = 4
speaker_dim = 256
decoder_initial_channels = 512
resblock_dilations = 1 3 5

[pbtc]
filters = 256

[losses]
mel_weight = 45

[training]
batch_size = 96
segment_samples = 32768
warmup_steps = 400000
pretrain_steps = 200000
adapt_steps = 50000
)";

const char* kDeskOverlay = R"(
[pbtc]
filters = 64
)";

}  // namespace

Config Config::defaults(const std::string& profile) {
  Config c;
  std::string p = profile.empty() ? "desk" : lower(profile);
  require(p == "desk" || p == "vits", ErrorCode::kConfig,
          "unknown profile: " + profile);
  c.profile_ = p;
  c.overlay_text(kBaseDefaults, "<defaults>");
  c.overlay_text(p == "vits" ? kVitsOverlay : kDeskOverlay, "<profile>");
  c.set("meta", "profile", p);
  return c;
}

Config Config::load_file(const std::string& path, const std::string& profile) {
  Config c = defaults(profile);
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  c.overlay_text(ss.str(), path);
  c.apply_env_overrides();
  return c;
}

Config Config::from_snapshot(const std::string& text) {
  Config c;
  c.overlay_text(text, "<snapshot>");
  if (c.has("meta", "profile")) c.profile_ = c.get_string("meta", "profile");
  return c;
}

void Config::overlay_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      require(t.back() == ']', ErrorCode::kConfig,
              origin + ":" + std::to_string(lineno) + ": malformed section");
      section = lower(trim(t.substr(1, t.size() - 2)));
      continue;
    }
    const size_t eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig,
            origin + ":" + std::to_string(lineno) + ": expected key = value");
    require(!section.empty(), ErrorCode::kConfig,
            origin + ":" + std::to_string(lineno) + ": key outside a section");
    sections_[section][lower(trim(t.substr(0, eq)))] = trim(t.substr(eq + 1));
  }
}

void Config::apply_env_overrides() {
  for (char** e = environ; *e != nullptr; ++e) {
    std::string entry(*e);
    if (entry.rfind("SVCFORGE_", 0) != 0) continue;
    const size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string name = entry.substr(9, eq - 9);
    const size_t us = name.find('_');
    if (us == std::string::npos) continue;
    set(lower(name.substr(0, us)), lower(name.substr(us + 1)),
        entry.substr(eq + 1));
  }
}

void Config::set(const std::string& section, const std::string& key,
                 const std::string& value) {
  sections_[lower(section)][lower(key)] = value;
}

bool Config::has(const std::string& section, const std::string& key) const {
  auto s = sections_.find(lower(section));
  return s != sections_.end() && s->second.count(lower(key)) > 0;
}

std::string Config::get_string(const std::string& section,
                               const std::string& key) const {
  auto s = sections_.find(lower(section));
  require(s != sections_.end(), ErrorCode::kConfig,
          "missing config section: " + section);
  auto k = s->second.find(lower(key));
  require(k != s->second.end(), ErrorCode::kConfig,
          "missing config key: " + section + "." + key);
  return k->second;
}

long long Config::get_int(const std::string& section,
                          const std::string& key) const {
  const std::string v = get_string(section, key);
  try {
    size_t used = 0;
    long long r = std::stoll(v, &used);
    require(used == v.size(), ErrorCode::kConfig, "bad integer");
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    raise(ErrorCode::kConfig,
          "config " + section + "." + key + ": not an integer: " + v);
  }
}

double Config::get_double(const std::string& section,
                          const std::string& key) const {
  const std::string v = get_string(section, key);
  try {
    size_t used = 0;
    double r = std::stod(v, &used);
    require(used == v.size(), ErrorCode::kConfig, "bad number");
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    raise(ErrorCode::kConfig,
          "config " + section + "." + key + ": not a number: " + v);
  }
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
  const std::string v = lower(get_string(section, key));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  raise(ErrorCode::kConfig,
        "config " + section + "." + key + ": not a boolean: " + v);
}

std::vector<long long> Config::get_int_list(const std::string& section,
                                            const std::string& key) const {
  std::vector<long long> out;
  std::string v = get_string(section, key);
  std::replace(v.begin(), v.end(), ',', ' ');
  std::istringstream is(v);
  long long x = 0;
  while (is >> x) out.push_back(x);
  return out;
}

std::vector<double> Config::get_double_list(const std::string& section,
                                            const std::string& key) const {
  std::vector<double> out;
  std::string v = get_string(section, key);
  std::replace(v.begin(), v.end(), ',', ' ');
  std::istringstream is(v);
  double x = 0;
  while (is >> x) out.push_back(x);
  return out;
}

std::string Config::dump() const {
  std::ostringstream os;
  for (const auto& [sec, kv] : sections_) {
    os << '[' << sec << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
    os << '\n';
  }
  return os.str();
}

}  // namespace svcforge
