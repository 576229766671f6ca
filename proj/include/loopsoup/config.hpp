#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "brownian.hpp"
#include "engine.hpp"
#include "lattice.hpp"
#include "observables.hpp"

namespace loopsoup {

/// A configuration problem, tied to the offending "section.key".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

namespace detail {

inline std::string_view trim_view(std::string_view v) {
  while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.remove_prefix(1);
  while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.remove_suffix(1);
  return v;
}

/// expr := term (('+'|'-') term)*, term := unary (('*'|'/') unary)*,
/// unary := ('+'|'-') unary | number | pi | inf | '(' expr ')'.
class ExprParser {
 public:
  explicit ExprParser(std::string_view s) : s_(s) {}

  double parse() {
    const double v = expr();
    skip();
    if (i_ != s_.size()) fail();
    return v;
  }

 private:
  [[noreturn]] void fail() const { throw std::invalid_argument("cannot read '" + std::string(s_) + "' as a number"); }
  void skip() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  bool eat(char c) {
    skip();
    if (i_ < s_.size() && s_[i_] == c) {
      ++i_;
      return true;
    }
    return false;
  }
  bool word(std::string_view w) {
    skip();
    if (s_.substr(i_, w.size()) != w) return false;
    const std::size_t e = i_ + w.size();
    if (e < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[e])) || s_[e] == '_')) return false;
    i_ = e;
    return true;
  }
  double expr() {
    double v = term();
    for (;;) {
      if (eat('+')) v += term();
      else if (eat('-')) v -= term();
      else return v;
    }
  }
  double term() {
    double v = unary();
    for (;;) {
      if (eat('*')) v *= unary();
      else if (eat('/')) v /= unary();
      else return v;
    }
  }
  double unary() {
    if (eat('-')) return -unary();
    if (eat('+')) return unary();
    if (eat('(')) {
      const double v = expr();
      if (!eat(')')) fail();
      return v;
    }
    if (word("pi")) return std::numbers::pi;
    if (word("inf")) return std::numeric_limits<double>::infinity();
    skip();
    std::size_t e = i_;
    while (e < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[e])) || s_[e] == '.' ||
                             ((s_[e] == 'e' || s_[e] == 'E') && e > i_) ||
                             ((s_[e] == '-' || s_[e] == '+') && e > i_ && (s_[e - 1] == 'e' || s_[e - 1] == 'E'))))
      ++e;
    if (e == i_) fail();
    double v = 0.0;
    const auto r = std::from_chars(s_.data() + i_, s_.data() + e, v);
    if (r.ec != std::errc() || r.ptr != s_.data() + e) fail();
    i_ = e;
    return v;
  }

  std::string_view s_;
  std::size_t i_ = 0;
};

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim_view(s).empty()) return out;
  for (;;) {
    const auto cut = s.find(sep);
    out.emplace_back(trim_view(s.substr(0, cut)));
    if (cut == std::string_view::npos) return out;
    s.remove_prefix(cut + 1);
  }
}

}  // namespace detail

/// Numbers may be written as expressions in pi, e.g. "-2*pi/3"; "inf" is infinity.
inline double eval_number(std::string_view text) { return detail::ExprParser(text).parse(); }

/// Raw key/value text by section, read strictly.
struct IniDocument {
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, int> line_of;  ///< "section.key" -> line
};

inline IniDocument parse_ini(std::istream& is) {
  IniDocument doc;
  std::string line, section;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    std::string_view v = detail::trim_view(line);
    if (v.empty() || v.front() == '#' || v.front() == ';') continue;
    if (v.front() == '[') {
      if (v.back() != ']') throw ConfigError("line " + std::to_string(n), "unterminated section header");
      section = std::string(detail::trim_view(v.substr(1, v.size() - 2)));
      if (section.empty()) throw ConfigError("line " + std::to_string(n), "empty section name");
      doc.values[section];
      continue;
    }
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(n), "expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(n), "key outside any section");
    const std::string key(detail::trim_view(v.substr(0, eq)));
    std::string_view val = v.substr(eq + 1);
    if (const auto hash = val.find(" #"); hash != std::string_view::npos) val = val.substr(0, hash);
    const std::string full = section + "." + key;
    if (key.empty()) throw ConfigError("line " + std::to_string(n), "empty key");
    if (!doc.values[section].emplace(key, std::string(detail::trim_view(val))).second) throw ConfigError(full, "duplicate key");
    doc.line_of[full] = n;
  }
  return doc;
}

struct RunSection {
  std::string name = "run";
  std::uint64_t seed = 1;
  std::uint64_t replicas = 1000;
  std::uint64_t first_replica = 0;
  unsigned workers = 0;  ///< 0: LOOPSOUP_WORKERS, else the hardware
  std::string out = ".";
};

struct SoupSection {
  std::string domain = "unit_disk";
  double lambda = 1.0;
  double delta = 0.05;
  double R = std::numeric_limits<double>::infinity();
  std::size_t steps = 1024;
  double mass = 0.0;
  int refine_levels = 2;
  double pitch_fraction = 1.0 / 256.0;
  double pitch_delta_fraction = 0.0;
};

struct ObservableSection {
  Model model = Model::Layering;
  std::string estimator = "direct";
  ChargeVector spec;
};

struct LatticeSection {
  std::string domain = "grid(3,3)";
  double mass = 0.0;
  double tail = 1e-5;
  bool ks = false;
};

struct ClustersSection {
  double resolution = 0.05;
  std::size_t probes_per_side = 16;
  std::vector<double> lengths;
};

/// Fully resolved run description. Sections not present in the file keep their defaults.
struct RunConfig {
  RunSection run;
  SoupSection soup;
  ObservableSection observable;
  LatticeSection lattice;
  ClustersSection clusters;

  ContinuumDomain continuum_domain() const;
  LatticeDomain lattice_domain() const;
  CutoffWindow window() const { return CutoffWindow(soup.delta, soup.R); }
  SoupParams soup_params() const;

  /// Canonical text of every key, defaults included; parsing it gives the same config.
  std::string resolved() const;
  /// The resolved text without run.workers and run.out, which do not change results.
  std::string result_text() const;
  std::string hash() const;
};

namespace detail {

inline std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string join_numbers(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "|" : "") + fmt(v[i]);
  return s;
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_number(const std::string& key, const std::string& v) {
  try {
    return eval_number(v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

inline std::vector<double> parse_number_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& t : split(v, '|')) out.push_back(parse_number(key, t));
  return out;
}

/// Evaluates the arguments of "shape(a,b;c)" and prints them back canonically.
inline std::pair<std::string, std::vector<double>> parse_shape(const std::string& key, const std::string& v) {
  try {
    auto [name, raw] = split_call(v);
    std::vector<double> a;
    for (const auto& r : raw) a.push_back(eval_number(r));
    return {name, a};
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

inline std::string shape_text(const std::string& name, const std::vector<double>& a) {
  if (a.empty()) return name;
  std::string s = name + "(";
  for (std::size_t i = 0; i < a.size(); ++i) s += (i ? "," : "") + fmt(a[i]);
  return s + ")";
}

inline LatticeDomain make_lattice_domain(const std::string& name, const std::vector<double>& a) {
  auto need = [&](std::size_t n) {
    if (a.size() != n) throw std::invalid_argument("lattice domain '" + name + "' takes " + std::to_string(n) + " arguments");
  };
  auto as_int = [](double x) {
    if (x != std::round(x) || std::abs(x) > 1e6) throw std::invalid_argument("lattice coordinates must be integers");
    return static_cast<int>(x);
  };
  if (name == "grid") {
    need(2);
    if (a[0] < 1 || a[1] < 1) throw std::invalid_argument("grid needs positive width and height");
    return LatticeDomain::grid(as_int(a[0]), as_int(a[1]));
  }
  if (name == "rectangle") {
    need(4);
    return LatticeDomain::rectangle(as_int(a[0]), as_int(a[1]), as_int(a[2]), as_int(a[3]));
  }
  if (name == "disk") {
    need(3);
    return LatticeDomain::disk(a[0], a[1], a[2]);
  }
  throw std::invalid_argument("unknown lattice domain '" + name + "'");
}

struct KeySpec {
  const char* section;
  const char* key;
};

inline constexpr KeySpec kKnownKeys[] = {
    {"run", "name"},           {"run", "seed"},           {"run", "replicas"},
    {"run", "first_replica"},  {"run", "workers"},        {"run", "out"},
    {"soup", "domain"},        {"soup", "lambda"},        {"soup", "delta"},
    {"soup", "R"},             {"soup", "steps"},         {"soup", "mass"},
    {"soup", "refine_levels"}, {"soup", "pitch_fraction"}, {"soup", "pitch_delta_fraction"},
    {"observable", "model"},   {"observable", "estimator"}, {"observable", "points"},
    {"observable", "charges"}, {"lattice", "domain"},     {"lattice", "mass"},
    {"lattice", "tail"},       {"lattice", "ks"},         {"clusters", "resolution"},
    {"clusters", "probes_per_side"}, {"clusters", "lengths"},
};

}  // namespace detail

inline ContinuumDomain RunConfig::continuum_domain() const {
  const auto [name, a] = detail::parse_shape("soup.domain", soup.domain);
  try {
    return make_continuum_domain(name, a);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("soup.domain", e.what());
  }
}

inline LatticeDomain RunConfig::lattice_domain() const {
  const auto [name, a] = detail::parse_shape("lattice.domain", lattice.domain);
  try {
    return detail::make_lattice_domain(name, a);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("lattice.domain", e.what());
  }
}

inline SoupParams RunConfig::soup_params() const {
  SoupParams p;
  p.domain = continuum_domain();
  p.lambda = soup.lambda;
  p.window = window();
  p.steps = soup.steps;
  p.pitch_diameter_fraction = soup.pitch_fraction;
  p.pitch_delta_fraction = soup.pitch_delta_fraction;
  p.refine_levels = soup.refine_levels;
  p.seed = run.seed;
  p.first_replica = run.first_replica;
  p.workers = run.workers;
  return p;
}

inline std::string RunConfig::resolved() const {
  using detail::fmt;
  std::ostringstream os;
  os << "[run]\n"
     << "name = " << run.name << "\nseed = " << run.seed << "\nreplicas = " << run.replicas << "\nfirst_replica = " << run.first_replica
     << "\nworkers = " << run.workers << "\nout = " << run.out << "\n\n";
  os << "[soup]\n"
     << "domain = " << soup.domain << "\nlambda = " << fmt(soup.lambda) << "\ndelta = " << fmt(soup.delta) << "\nR = " << fmt(soup.R)
     << "\nsteps = " << soup.steps << "\nmass = " << fmt(soup.mass) << "\nrefine_levels = " << soup.refine_levels
     << "\npitch_fraction = " << fmt(soup.pitch_fraction) << "\npitch_delta_fraction = " << fmt(soup.pitch_delta_fraction) << "\n\n";
  std::string pts;
  for (std::size_t j = 0; j < observable.spec.points.size(); ++j)
    pts += (j ? "|" : "") + fmt(observable.spec.points[j].real()) + ":" + fmt(observable.spec.points[j].imag());
  os << "[observable]\n"
     << "model = " << model_name(observable.model) << "\nestimator = " << observable.estimator << "\npoints = " << pts
     << "\ncharges = " << detail::join_numbers(observable.spec.charges) << "\n\n";
  os << "[lattice]\n"
     << "domain = " << lattice.domain << "\nmass = " << fmt(lattice.mass) << "\ntail = " << fmt(lattice.tail) << "\nks = " << (lattice.ks ? "true" : "false")
     << "\n\n";
  os << "[clusters]\n"
     << "resolution = " << fmt(clusters.resolution) << "\nprobes_per_side = " << clusters.probes_per_side
     << "\nlengths = " << detail::join_numbers(clusters.lengths) << "\n";
  return os.str();
}

inline std::string RunConfig::result_text() const {
  std::istringstream is(resolved());
  std::string line, kept;
  while (std::getline(is, line))
    if (line.rfind("workers = ", 0) != 0 && line.rfind("out = ", 0) != 0) kept += line + "\n";
  return kept;
}

inline std::string RunConfig::hash() const { return hex64(fnv1a(result_text())); }

/// Builds a config from a parsed document. Every key must be known and every value valid.
inline RunConfig config_from_ini(const IniDocument& doc) {
  for (const auto& [sec, kv] : doc.values) {
    bool known_section = false;
    for (const auto& k : detail::kKnownKeys) known_section |= sec == k.section;
    if (!known_section) throw ConfigError(sec, "unknown section");
    for (const auto& [key, _] : kv) {
      bool known = false;
      for (const auto& k : detail::kKnownKeys) known |= sec == k.section && key == k.key;
      if (!known) throw ConfigError(sec + "." + key, "unknown key");
    }
  }
  auto get = [&](const char* sec, const char* key) -> std::optional<std::string> {
    const auto s = doc.values.find(sec);
    if (s == doc.values.end()) return std::nullopt;
    const auto k = s->second.find(key);
    if (k == s->second.end()) return std::nullopt;
    return k->second;
  };
  auto full = [](const char* sec, const char* key) { return std::string(sec) + "." + key; };

  RunConfig c;
  if (auto v = get("run", "name")) {
    if (v->empty() || v->find_first_of(" \t,") != std::string::npos) throw ConfigError("run.name", "must be a single word");
    c.run.name = *v;
  }
  if (auto v = get("run", "seed")) c.run.seed = detail::parse_unsigned<std::uint64_t>("run.seed", *v);
  if (auto v = get("run", "replicas")) c.run.replicas = detail::parse_unsigned<std::uint64_t>("run.replicas", *v);
  if (auto v = get("run", "first_replica")) c.run.first_replica = detail::parse_unsigned<std::uint64_t>("run.first_replica", *v);
  if (auto v = get("run", "workers")) c.run.workers = detail::parse_unsigned<unsigned>("run.workers", *v);
  if (auto v = get("run", "out")) c.run.out = *v;
  if (c.run.replicas == 0) throw ConfigError("run.replicas", "must be positive");

  if (auto v = get("soup", "domain")) {
    const auto [name, a] = detail::parse_shape("soup.domain", *v);
    c.soup.domain = detail::shape_text(name, a);
    c.continuum_domain();
  }
  auto number = [&](const char* sec, const char* key, double& dst) {
    if (auto v = get(sec, key)) dst = detail::parse_number(full(sec, key), *v);
  };
  number("soup", "lambda", c.soup.lambda);
  number("soup", "delta", c.soup.delta);
  number("soup", "R", c.soup.R);
  number("soup", "mass", c.soup.mass);
  number("soup", "pitch_fraction", c.soup.pitch_fraction);
  number("soup", "pitch_delta_fraction", c.soup.pitch_delta_fraction);
  if (auto v = get("soup", "steps")) c.soup.steps = detail::parse_unsigned<std::size_t>("soup.steps", *v);
  if (auto v = get("soup", "refine_levels")) c.soup.refine_levels = detail::parse_unsigned<int>("soup.refine_levels", *v);
  if (!(c.soup.lambda >= 0.0) || !std::isfinite(c.soup.lambda)) throw ConfigError("soup.lambda", "must be finite and non-negative");
  if (!(c.soup.delta > 0.0) || !std::isfinite(c.soup.delta)) throw ConfigError("soup.delta", "must be positive");
  if (!(c.soup.R > c.soup.delta)) throw ConfigError("soup.R", "must exceed soup.delta");
  if (!(c.soup.mass >= 0.0) || !std::isfinite(c.soup.mass)) throw ConfigError("soup.mass", "must be finite and non-negative");
  if (c.soup.steps < 2 || !std::has_single_bit(c.soup.steps)) throw ConfigError("soup.steps", "must be a power of two >= 2");
  if (c.soup.refine_levels > 6) throw ConfigError("soup.refine_levels", "at most 6");
  if (!(c.soup.pitch_fraction > 0.0 && c.soup.pitch_fraction <= 1.0)) throw ConfigError("soup.pitch_fraction", "must lie in (0, 1]");
  if (!(c.soup.pitch_delta_fraction >= 0.0)) throw ConfigError("soup.pitch_delta_fraction", "must be non-negative");
  if (!c.continuum_domain().bounded() && !std::isfinite(c.soup.R)) throw ConfigError("soup.R", "a finite cutoff is required off bounded domains");

  if (auto v = get("observable", "model")) {
    if (*v == "layering") c.observable.model = Model::Layering;
    else if (*v == "winding") c.observable.model = Model::Winding;
    else throw ConfigError("observable.model", "expected layering or winding, got '" + *v + "'");
  }
  if (auto v = get("observable", "estimator")) {
    if (*v != "direct" && *v != "plugin") throw ConfigError("observable.estimator", "expected direct or plugin, got '" + *v + "'");
    c.observable.estimator = *v;
  }
  if (c.observable.estimator == "plugin" && c.observable.model != Model::Layering)
    throw ConfigError("observable.estimator", "the plugin estimator is defined for the layering model only");
  if (auto v = get("observable", "points")) {
    for (const auto& t : detail::split(*v, '|')) {
      const auto colon = t.find(':');
      if (colon == std::string::npos) throw ConfigError("observable.points", "points are written x:y, got '" + t + "'");
      c.observable.spec.points.emplace_back(detail::parse_number("observable.points", t.substr(0, colon)),
                                            detail::parse_number("observable.points", t.substr(colon + 1)));
    }
  }
  if (auto v = get("observable", "charges")) c.observable.spec.charges = detail::parse_number_list("observable.charges", *v);
  if (c.observable.spec.points.size() != c.observable.spec.charges.size())
    throw ConfigError("observable.charges", "need one charge per point");
  if (c.observable.spec.points.size() > kMaxObservedPoints) throw ConfigError("observable.points", "at most 16 points");

  if (auto v = get("lattice", "domain")) {
    const auto [name, a] = detail::parse_shape("lattice.domain", *v);
    c.lattice.domain = detail::shape_text(name, a);
    c.lattice_domain();
  }
  number("lattice", "mass", c.lattice.mass);
  number("lattice", "tail", c.lattice.tail);
  if (auto v = get("lattice", "ks")) c.lattice.ks = detail::parse_bool("lattice.ks", *v);
  if (!(c.lattice.mass >= 0.0) || !std::isfinite(c.lattice.mass)) throw ConfigError("lattice.mass", "must be finite and non-negative");
  if (!(c.lattice.tail > 0.0 && c.lattice.tail < 1.0)) throw ConfigError("lattice.tail", "must lie in (0, 1)");

  number("clusters", "resolution", c.clusters.resolution);
  if (auto v = get("clusters", "probes_per_side")) c.clusters.probes_per_side = detail::parse_unsigned<std::size_t>("clusters.probes_per_side", *v);
  if (auto v = get("clusters", "lengths")) c.clusters.lengths = detail::parse_number_list("clusters.lengths", *v);
  if (!(c.clusters.resolution > 0.0)) throw ConfigError("clusters.resolution", "must be positive");
  if (c.clusters.probes_per_side < 1) throw ConfigError("clusters.probes_per_side", "must be positive");
  if (!std::is_sorted(c.clusters.lengths.begin(), c.clusters.lengths.end())) throw ConfigError("clusters.lengths", "must be increasing");
  return c;
}

inline RunConfig parse_config(std::istream& is) { return config_from_ini(parse_ini(is)); }

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

}  // namespace loopsoup
