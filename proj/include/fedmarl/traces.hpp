#pragma once

// Trace tables of per-client training/communication latency and cost, plus a
// synthetic generator anchored to measured mobile-device numbers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedmarl/error.hpp"
#include "fedmarl/rng.hpp"

namespace fedmarl::traces {

struct TraceCatalog {
  // Mean one-epoch training seconds at 60 samples, one entry per device class.
  std::vector<double> device_base{};
  std::vector<std::size_t> data_sizes{20, 25, 30, 35, 40, 45, 50, 55, 60};
  // Mean upload / download seconds, one entry per location.
  std::vector<double> upload_anchor{};
  std::vector<double> download_anchor{};
  double sigma = 0.15;
  std::size_t samples_per_cell = 200;

  std::size_t num_devices() const { return device_base.size(); }
  std::size_t num_locations() const { return upload_anchor.size(); }

  // Eight device classes spread evenly over [0.96, 1.78] s/epoch (4.8 s and
  // 8.9 s for five epochs at 60 samples); four locations with upload means
  // spread over [1.4, 1.68] s and download means of 0.361 s.
  static TraceCatalog standard() {
    TraceCatalog c;
    for (int d = 0; d < 8; ++d) c.device_base.push_back(0.96 + (1.78 - 0.96) * d / 7.0);
    for (int l = 0; l < 4; ++l) {
      c.upload_anchor.push_back(1.4 + (1.68 - 1.4) * l / 3.0);
      c.download_anchor.push_back(0.361);
    }
    return c;
  }

  void validate() const {
    if (device_base.empty() || upload_anchor.empty()) throw ConfigError("trace catalog must be nonempty");
    if (download_anchor.size() != upload_anchor.size())
      throw ConfigError("trace catalog: upload/download anchor counts differ");
    if (data_sizes.empty()) throw ConfigError("trace catalog: no data sizes");
    if (!std::is_sorted(data_sizes.begin(), data_sizes.end()) ||
        std::adjacent_find(data_sizes.begin(), data_sizes.end()) != data_sizes.end())
      throw ConfigError("trace catalog: data sizes must be strictly increasing");
    for (double v : device_base)
      if (!(v > 0.0)) throw ConfigError("trace catalog: device base latency must be positive");
    for (std::size_t l = 0; l < upload_anchor.size(); ++l) {
      if (!(download_anchor[l] > 0.0) || !(upload_anchor[l] > download_anchor[l]))
        throw ConfigError("trace catalog: need upload > download > 0 at every location");
    }
    if (!(sigma >= 0.0)) throw ConfigError("trace catalog: sigma must be nonnegative");
    if (samples_per_cell < 1) throw ConfigError("trace catalog: samples_per_cell must be positive");
  }
};

inline std::string device_name(std::size_t d) { return "device-" + std::to_string(d); }
inline std::string location_name(std::size_t l) { return "loc-" + std::to_string(l); }

struct ClientProfile {
  std::size_t client_id = 0;
  std::size_t device_type = 0;
  std::size_t location = 0;
  std::size_t data_size = 0;
};

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

class TraceTable {
 public:
  using TrainKey = std::pair<std::size_t, std::size_t>;  // (device, data size)

  std::map<TrainKey, std::vector<double>> train;
  std::map<std::size_t, std::vector<double>> upload;
  std::map<std::size_t, std::vector<double>> download;

  std::vector<std::size_t> data_sizes() const {
    std::vector<std::size_t> s;
    for (const auto& [k, _] : train) s.push_back(k.second);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }

  // Catalog size used for a client holding `n` examples: the nearest size,
  // ties resolved upward, clamped to the catalog range.
  std::size_t size_bucket(std::size_t n) const {
    const auto sizes = data_sizes();
    if (sizes.empty()) throw ArtifactError("trace table has no training cells");
    std::size_t best = sizes.front();
    for (auto s : sizes) {
      const auto ds = s > n ? s - n : n - s;
      const auto db = best > n ? best - n : n - best;
      if (ds < db || (ds == db && s > best)) best = s;
    }
    return best;
  }

  const std::vector<double>& train_cell(std::size_t device, std::size_t data_size) const {
    auto it = train.find({device, size_bucket(data_size)});
    if (it == train.end())
      throw ArtifactError("missing train trace cell for " + device_name(device) + " size " +
                          std::to_string(data_size));
    return it->second;
  }
  const std::vector<double>& upload_cell(std::size_t loc) const {
    auto it = upload.find(loc);
    if (it == upload.end()) throw ArtifactError("missing upload trace cell for " + location_name(loc));
    return it->second;
  }
  const std::vector<double>& download_cell(std::size_t loc) const {
    auto it = download.find(loc);
    if (it == download.end()) throw ArtifactError("missing download trace cell for " + location_name(loc));
    return it->second;
  }

  // Throws ArtifactError when a structural invariant does not hold.
  void validate() const {
    if (train.empty() || upload.empty()) throw ArtifactError("trace table is empty");
    auto positive = [](const std::vector<double>& v, const std::string& what) {
      if (v.empty()) throw ArtifactError("empty trace cell: " + what);
      for (double x : v)
        if (!(x > 0.0) || !std::isfinite(x)) throw ArtifactError("nonpositive sample in " + what);
    };
    std::map<std::size_t, std::pair<std::size_t, double>> last;  // device -> (size, mean)
    for (const auto& [k, v] : train) {
      positive(v, "train " + device_name(k.first));
      const double m = mean_of(v);
      auto it = last.find(k.first);
      if (it != last.end() && m < it->second.second)
        throw ArtifactError("train latency decreases with data size for " + device_name(k.first));
      last[k.first] = {k.second, m};
    }
    for (const auto& [l, v] : upload) {
      positive(v, "upload " + location_name(l));
      auto d = download.find(l);
      if (d == download.end()) throw ArtifactError("missing download cell for " + location_name(l));
      positive(d->second, "download " + location_name(l));
      if (!(mean_of(v) > mean_of(d->second)))
        throw ArtifactError("upload mean not above download mean at " + location_name(l));
    }
  }
};

// Mean-one lognormal multiplier with log-std sigma.
inline double lognormal_unit(Rng& rng, double sigma) {
  std::normal_distribution<double> g(0.0, 1.0);
  return std::exp(sigma * g(rng) - 0.5 * sigma * sigma);
}

inline TraceTable gen_synthetic_traces(const TraceCatalog& cat, std::uint64_t seed) {
  cat.validate();
  Rng rng(seed);
  TraceTable t;
  // One set of noise factors per device, scaled by s/60 for every size, so
  // cell means are monotone in data size for any sample count.
  std::vector<double> factor(cat.samples_per_cell);
  for (std::size_t d = 0; d < cat.num_devices(); ++d) {
    for (double& f : factor) f = lognormal_unit(rng, cat.sigma);
    for (auto s : cat.data_sizes) {
      const double mean = cat.device_base[d] * static_cast<double>(s) / 60.0;
      auto& cell = t.train[{d, s}];
      cell.resize(cat.samples_per_cell);
      for (std::size_t k = 0; k < cell.size(); ++k) cell[k] = mean * factor[k];
    }
  }
  for (std::size_t l = 0; l < cat.num_locations(); ++l) {
    auto& up = t.upload[l];
    auto& down = t.download[l];
    up.resize(cat.samples_per_cell);
    down.resize(cat.samples_per_cell);
    for (double& x : up) x = cat.upload_anchor[l] * lognormal_unit(rng, cat.sigma);
    for (double& x : down) x = cat.download_anchor[l] * lognormal_unit(rng, cat.sigma);
  }
  return t;
}

struct LatencyDraw {
  double probe = 0.0;
  double rest = 0.0;
  double upload = 0.0;
  double download = 0.0;
};

inline double draw_from(const std::vector<double>& cell, Rng& rng) {
  return cell[uniform_index(rng, cell.size())];
}

// Probe = one epoch draw; rest = epochs_post_probe x one independent epoch
// draw; upload/download = one draw each for the client's location.
inline LatencyDraw sample_latency(const TraceTable& table, const ClientProfile& profile,
                                  std::size_t epochs_post_probe, Rng& rng) {
  const auto& train = table.train_cell(profile.device_type, profile.data_size);
  const auto& up = table.upload_cell(profile.location);
  const auto& down = table.download_cell(profile.location);
  LatencyDraw d;
  d.probe = draw_from(train, rng);
  d.rest = static_cast<double>(epochs_post_probe) * draw_from(train, rng);
  d.upload = draw_from(up, rng);
  d.download = draw_from(down, rng);
  return d;
}

// Per-client upload cost B_n, 1.0 unless overridden.
class CommCosts {
 public:
  CommCosts() = default;
  explicit CommCosts(double default_cost, std::map<std::size_t, double> overrides = {})
      : default_(default_cost), overrides_(std::move(overrides)) {
    if (!(default_ >= 0.0) || !std::isfinite(default_)) throw ConfigError("comm cost must be nonnegative");
    for (const auto& [c, v] : overrides_)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError("comm cost for client " + std::to_string(c) + " must be nonnegative");
  }

  double operator()(std::size_t client_id) const {
    auto it = overrides_.find(client_id);
    return it == overrides_.end() ? default_ : it->second;
  }

  double default_cost() const { return default_; }
  const std::map<std::size_t, double>& overrides() const { return overrides_; }

 private:
  double default_ = 1.0;
  std::map<std::size_t, double> overrides_;
};

inline double comm_cost(const CommCosts& costs, const ClientProfile& profile) {
  return costs(profile.client_id);
}

// Device and location drawn uniformly from the catalog for every client.
inline std::vector<ClientProfile> assign_profiles(std::span<const std::size_t> data_sizes,
                                                  const TraceCatalog& cat, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ClientProfile> out;
  for (std::size_t c = 0; c < data_sizes.size(); ++c) {
    ClientProfile p;
    p.client_id = c;
    p.device_type = uniform_index(rng, cat.num_devices());
    p.location = uniform_index(rng, cat.num_locations());
    p.data_size = data_sizes[c];
    out.push_back(p);
  }
  return out;
}

// Columns: client_id,device_type,location,data_size
inline void write_profiles_csv(std::ostream& os, std::span<const ClientProfile> profiles) {
  os << "client_id,device_type,location,data_size\n";
  for (const auto& p : profiles)
    os << p.client_id << ',' << device_name(p.device_type) << ',' << location_name(p.location) << ',' << p.data_size
       << '\n';
}

// ---- CSV ------------------------------------------------------------------
// Columns: kind(train|upload|download),device_type,location,data_size,sample_seconds

inline void write_trace_csv(std::ostream& os, const TraceTable& t) {
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "kind,device_type,location,data_size,sample_seconds\n";
  for (const auto& [k, v] : t.train)
    for (double x : v) os << "train," << device_name(k.first) << ",," << k.second << ',' << num(x) << '\n';
  for (const auto& [l, v] : t.upload)
    for (double x : v) os << "upload,," << location_name(l) << ",," << num(x) << '\n';
  for (const auto& [l, v] : t.download)
    for (double x : v) os << "download,," << location_name(l) << ",," << num(x) << '\n';
}

namespace detail {

inline std::size_t parse_indexed(const std::string& s, const std::string& prefix, std::size_t lineno) {
  if (s.rfind(prefix, 0) != 0 || s.size() == prefix.size())
    throw ArtifactError("trace csv line " + std::to_string(lineno) + ": expected " + prefix + "<n>, got '" + s + "'");
  std::size_t v = 0;
  for (std::size_t i = prefix.size(); i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9')
      throw ArtifactError("trace csv line " + std::to_string(lineno) + ": bad identifier '" + s + "'");
    v = v * 10 + static_cast<std::size_t>(s[i] - '0');
  }
  return v;
}

}  // namespace detail

inline TraceTable read_trace_csv(std::istream& is) {
  TraceTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("kind,", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    auto fail = [&](const std::string& why) {
      return ArtifactError("trace csv line " + std::to_string(lineno) + ": " + why);
    };
    if (f.size() != 5) throw fail("expected 5 columns, got " + std::to_string(f.size()));
    double x = 0.0;
    try {
      std::size_t pos = 0;
      x = std::stod(f[4], &pos);
      if (pos != f[4].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw fail("malformed sample_seconds '" + f[4] + "'");
    }
    if (!(x > 0.0) || !std::isfinite(x)) throw fail("sample_seconds must be positive");
    if (f[0] == "train") {
      const auto d = detail::parse_indexed(f[1], "device-", lineno);
      std::size_t size = 0;
      try {
        size = static_cast<std::size_t>(std::stoul(f[3]));
      } catch (const std::logic_error&) {
        throw fail("malformed data_size '" + f[3] + "'");
      }
      if (size == 0) throw fail("data_size must be positive");
      t.train[{d, size}].push_back(x);
    } else if (f[0] == "upload") {
      t.upload[detail::parse_indexed(f[2], "loc-", lineno)].push_back(x);
    } else if (f[0] == "download") {
      t.download[detail::parse_indexed(f[2], "loc-", lineno)].push_back(x);
    } else {
      throw fail("unknown kind '" + f[0] + "'");
    }
  }
  t.validate();
  return t;
}

inline std::vector<ClientProfile> read_profiles_csv(std::istream& is) {
  std::vector<ClientProfile> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("client_id,", 0) == 0)) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    auto fail = [&](const std::string& why) {
      return ArtifactError("profile csv line " + std::to_string(lineno) + ": " + why);
    };
    if (f.size() != 4) throw fail("expected 4 columns");
    ClientProfile p;
    try {
      p.client_id = std::stoul(f[0]);
      p.data_size = std::stoul(f[3]);
    } catch (const std::logic_error&) {
      throw fail("malformed number");
    }
    if (p.client_id != out.size()) throw fail("client ids out of order");
    p.device_type = detail::parse_indexed(f[1], "device-", lineno);
    p.location = detail::parse_indexed(f[2], "loc-", lineno);
    out.push_back(p);
  }
  return out;
}

}  // namespace fedmarl::traces
