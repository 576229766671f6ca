// loopsoup command-line front end.
//
//   loopsoup sample   --config run.ini   soup realizations + manifest
//   loopsoup estimate --config run.ini   correlator CSV + manifest
//   loopsoup gff      --config run.ini   occupation field against the GFF
//   loopsoup clusters --config run.ini   cluster survival curve
//   loopsoup verify   --suite NAME       acceptance checks
//   loopsoup report   a.csv b.csv ...    pooled correlator estimates
//
// Exit codes: 0 success, 1 failed checks, 2 usage or configuration error, 3 I/O error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "loopsoup/loopsoup.hpp"

namespace fs = std::filesystem;
using namespace loopsoup;

namespace {

constexpr int kOk = 0, kFailed = 1, kUsage = 2, kIo = 3;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Refusal : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed, replicas;
  std::optional<unsigned> workers;
  std::optional<std::string> out;
};

RunConfig load(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) {
    std::ifstream is(f.config);
    if (!is) throw IoError("cannot open config file " + f.config);
    c = parse_config(is);
  }
  if (f.seed) c.run.seed = *f.seed;
  if (f.replicas) {
    if (*f.replicas == 0) throw ConfigError("run.replicas", "must be positive");
    c.run.replicas = *f.replicas;
  }
  if (f.workers) c.run.workers = *f.workers;
  if (f.out) c.run.out = *f.out;
  if (!fs::is_directory(c.run.out)) throw ConfigError("run.out", "output directory '" + c.run.out + "' does not exist");
  std::cerr << "# resolved configuration (hash " << c.hash() << ")\n";
  std::istringstream is(c.resolved());
  for (std::string line; std::getline(is, line);) std::cerr << "# " << line << '\n';
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os.flush()) throw IoError("write failed for " + p.string());
}

// Started before the config is read; every manifest reports time since then.
const Stopwatch g_clock;

/// Data files are byte-identical across reruns; manifests differ only in wall_time_s.
void write_manifest(const RunConfig& c, const std::string& stem, const std::string& experiment, std::uint64_t content_hash,
                    nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
  ExperimentPlan plan{experiment, c.run.seed, c.run.replicas, c.run.first_replica, c.run.workers, {}};
  auto j = make_manifest(plan, content_hash, g_clock.seconds(), extra);
  j["config_hash"] = c.hash();
  j["config"] = c.result_text();
  write_file(fs::path(c.run.out) / (stem + ".manifest.json"), j.dump(2) + "\n");
}

std::string hash_line(const std::string& h) { return "# config_hash=" + h + "\n"; }

ContinuumSoupRealization sample_one(const RunConfig& c, std::uint64_t replica) {
  RngStream rng = derive_stream(c.run.seed, replica);
  auto soup = sample_loop_soup(c.continuum_domain(), c.soup.lambda, c.window(), c.soup.steps, rng);
  soup.seed = c.run.seed;
  if (c.soup.mass > 0.0) soup = massive_thinning(soup, constant_continuum_mass(c.soup.mass), rng);
  return soup;
}

int cmd_sample(const Flags& f) {
  const RunConfig c = load(f);
  ExperimentPlan plan{"sample", c.run.seed, c.run.replicas, c.run.first_replica, c.run.workers, {}};
  const auto soups = run_indexed(plan, [&](std::uint64_t i, RngStream&) {
    std::ostringstream os;
    os << hash_line(c.hash()) << "# replica=" << i << '\n';
    write_continuum_soup(os, sample_one(c, i));
    return os.str();
  });
  Fnv1a h;
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < soups.size(); ++k) {
    char name[64];
    if (soups.size() == 1) std::snprintf(name, sizeof name, "soup.txt");
    else std::snprintf(name, sizeof name, "soup-%06llu.txt", static_cast<unsigned long long>(c.run.first_replica + k));
    write_file(fs::path(c.run.out) / name, soups[k]);
    h.update(fnv1a(soups[k]));
    files.push_back(name);
  }
  write_manifest(c, "soup", "sample", h.digest(), {{"files", files}});
  std::cout << "wrote " << soups.size() << " realization(s) to " << c.run.out << "\n";
  return kOk;
}

void check_charges(const RunConfig& c) {
  const auto& spec = c.observable.spec;
  if (spec.points.empty()) throw ConfigError("observable.points", "no observation points");
  const auto d = c.continuum_domain();
  if (d.shape() == ContinuumDomain::Shape::PlaneWindow && spec.points.size() >= 2 && !charge_conservation_check(spec.charges)) {
    double sum = 0.0;
    for (double b : spec.charges) sum += b;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "plane correlators of several points vanish unless the charges sum to a multiple of 2*pi; "
                  "observable.charges sum to %.12g (%.12g * 2*pi)",
                  sum, sum / (2.0 * std::numbers::pi));
    throw Refusal(buf);
  }
}

int cmd_estimate(const Flags& f) {
  const RunConfig c = load(f);
  check_charges(c);
  const SoupParams p = c.soup_params();
  const ChargeVector spec = merge_repeated_points(c.observable.spec);
  CorrelatorEstimate e;
  if (c.observable.estimator == "direct") {
    e = estimate_correlator_mc(spec, c.observable.model, p, c.run.replicas);
  } else {
    if (c.run.replicas < 100) throw ConfigError("run.replicas", "correlator estimates need at least 100 replicas");
    spec.validate();
    const auto data = sample_observations(spec.points, p, c.run.replicas, "correlator");
    e = estimate_correlator_plugin(spec, data, p.lambda, p.window, p.extrapolation());
    e.oracle = one_point_oracle(spec, Model::Layering, p.lambda, p.window, p.domain);
  }
  const std::string body = std::string(kCorrelatorCsvHeader) + "\n" + correlator_csv_row(e) + "\n";
  write_file(fs::path(c.run.out) / "estimate.csv", hash_line(c.hash()) + "# first_replica=" + std::to_string(c.run.first_replica) + "\n" + body);
  write_manifest(c, "estimate", "estimate", fnv1a(body), {{"imag", e.imag}, {"imag_stderr", e.imag_std_error}});
  std::cout << body;
  return kOk;
}

int cmd_gff(const Flags& f) {
  const RunConfig c = load(f);
  IsomorphismOptions opt;
  opt.seed = c.run.seed;
  opt.workers = c.run.workers;
  opt.tail_tolerance = c.lattice.tail;
  opt.with_ks = c.lattice.ks;
  const auto rep = isomorphism_check(c.lattice_domain(), constant_mass(c.lattice.mass), c.run.replicas, opt);
  std::string body = "moment,site,estimate,oracle,stderr,zscore\n";
  auto rows = [&](const char* m, const std::vector<GffReportRow>& v) {
    for (const auto& r : v)
      body += std::string(m) + ",\"" + r.site + "\"," + format17(r.estimate) + "," + format17(r.oracle) + "," + format17(r.std_error) + "," +
              format17(r.zscore) + "\n";
  };
  rows("L", rep.first_moment);
  rows("L2", rep.second_moment);
  write_file(fs::path(c.run.out) / "gff.csv", hash_line(c.hash()) + body);
  nlohmann::ordered_json extra;
  extra["max_length"] = rep.max_length;
  extra["truncation_bound"] = rep.truncation_bound;
  extra["visit_truncation_bound"] = rep.visit_truncation_bound;
  extra["max_abs_z"] = rep.max_abs_z();
  if (!rep.ks_distance.empty()) {
    extra["ks_distance"] = rep.ks_distance;
    extra["ks_p_value"] = rep.ks_p_value;
  }
  if (rep.low_replica_warning) std::cerr << "warning: fewer than 1000 replicas\n";
  write_manifest(c, "gff", "gff", fnv1a(body), extra);
  std::cout << body;
  return kOk;
}

int cmd_clusters(const Flags& f) {
  const RunConfig c = load(f);
  const auto d = c.continuum_domain();
  if (!d.bounded()) throw ConfigError("soup.domain", "cluster runs need a bounded domain");
  ClusterOptions opt;
  const Box& b = d.box();
  const std::size_t n = c.clusters.probes_per_side;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const Point z(b.x0 + b.width() * (0.25 + 0.5 * (i + 0.5) / double(n)), b.y0 + b.height() * (0.25 + 0.5 * (j + 0.5) / double(n)));
      if (d.contains(z)) opt.probes.push_back(z);
    }
  opt.lengths = c.clusters.lengths;
  if (opt.lengths.empty()) {
    const double top = 0.5 * std::min(b.width(), b.height());
    for (int i = 1; i <= 16; ++i) opt.lengths.push_back(top * i / 16.0);
  }
  ExperimentPlan plan{"clusters", c.run.seed, c.run.replicas, c.run.first_replica, c.run.workers, {}};
  const auto runs = run_indexed(plan, [&](std::uint64_t i, RngStream&) { return clusters(sample_one(c, i), c.clusters.resolution, opt); });
  const auto pooled = pool_cluster_stats(runs);
  std::string body = "L,survival,probes\n";
  for (std::size_t k = 0; k < pooled.lengths.size(); ++k)
    body += format17(pooled.lengths[k]) + "," + format17(pooled.survival[k]) + "," + std::to_string(pooled.probe_diameter.size()) + "\n";
  write_file(fs::path(c.run.out) / "clusters.csv", hash_line(c.hash()) + body);
  nlohmann::ordered_json extra;
  extra["fit_slope"] = pooled.fit_slope;
  extra["fit_r_squared"] = pooled.fit_r_squared;
  extra["fitted_xi"] = std::isfinite(pooled.fitted_xi) ? nlohmann::ordered_json(pooled.fitted_xi) : nlohmann::ordered_json(nullptr);
  extra["mean_cluster_count"] = double(pooled.cluster_count) / double(runs.size());
  write_manifest(c, "clusters", "clusters", fnv1a(body), extra);
  std::cout << body;
  std::printf("# log-linear fit: slope %.6g, R^2 %.4f, xi %.6g\n", pooled.fit_slope, pooled.fit_r_squared, pooled.fitted_xi);
  return kOk;
}

int cmd_verify(const std::string& suite, const Flags& f, double scale) {
  namespace acc = acceptance;
  std::vector<std::string> names;
  if (suite == "all") names = acc::full_run();
  else if (acc::find_suite(suite)) names = {suite};
  else {
    std::string known;
    for (const auto& s : acc::suites()) known += " " + s.name;
    throw ConfigError("--suite", "unknown suite '" + suite + "'; known suites:" + known + " all");
  }
  if (f.out && !fs::is_directory(*f.out)) throw ConfigError("--out", "output directory '" + *f.out + "' does not exist");
  acc::Settings st;
  if (f.seed) st.seed = *f.seed;
  if (f.workers) st.workers = *f.workers;
  st.scale = scale;
  bool ok = true;
  for (const auto& n : names) {
    const auto reps = acc::find_suite(n)->run(st);
    std::cout << acc::table(reps) << std::flush;
    for (const auto& r : reps) ok = ok && r.pass();
    if (f.out) write_file(fs::path(*f.out) / (n + ".csv"), acc::csv_of(reps));
  }
  std::cout << (ok ? "all checks passed\n" : "some checks failed\n");
  return ok ? kOk : kFailed;
}

// Pooling of estimate CSVs. Rows agree on everything but replicas, value and stderr.

struct CsvRow {
  std::vector<std::string> cells;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else cur += ch;
  }
  out.push_back(cur);
  return out;
}

int cmd_report(const std::vector<std::string>& files, const Flags& f) {
  if (files.empty()) throw ConfigError("report", "no CSV files given");
  if (f.out && !fs::is_directory(*f.out)) throw ConfigError("--out", "output directory '" + *f.out + "' does not exist");
  const auto header = split_csv(kCorrelatorCsvHeader);
  auto col = [&](const char* name) { return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin()); };
  const std::size_t c_rep = col("replicas"), c_val = col("value"), c_se = col("stderr"), c_or = col("oracle"), c_z = col("zscore"),
                    c_est = col("estimator"), c_model = col("model"), c_delta = col("delta"), c_R = col("R"), c_lambda = col("lambda"),
                    c_pts = col("points"), c_ch = col("charges");
  struct Group {
    std::vector<std::string> proto;
    AggregateResult agg;
  };
  std::map<std::string, Group> groups;
  std::vector<std::string> order, sources;
  for (const auto& path : files) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path);
    std::string line;
    bool seen_header = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (line[0] == '#') {
        if (line.rfind("# config_hash=", 0) == 0) sources.push_back(line.substr(14));
        continue;
      }
      if (!seen_header) {
        if (line != kCorrelatorCsvHeader) throw ConfigError(path, "not an estimate CSV");
        seen_header = true;
        continue;
      }
      auto cells = split_csv(line);
      if (cells.size() != header.size()) throw ConfigError(path, "row has " + std::to_string(cells.size()) + " cells");
      const std::string key = cells[c_model] + "," + cells[c_pts] + "," + cells[c_ch] + "," + cells[c_delta] + "," + cells[c_R] + "," +
                              cells[c_lambda] + "," + cells[c_est];
      AggregateResult a;
      a.replica_count = std::stoull(cells[c_rep]);
      const double v = std::stod(cells[c_val]), se = std::stod(cells[c_se]);
      const double n = double(a.replica_count);
      // Plugin rows report exp(-mean); pool the mean of the underlying statistic.
      const bool plugin = cells[c_est] == "plugin";
      a.mean = plugin ? -std::log(v) : v;
      a.std_error = plugin ? se / v : se;
      a.m2 = a.std_error * a.std_error * n * (n - 1.0);
      auto [it, fresh] = groups.try_emplace(key, Group{cells, {}});
      if (fresh) order.push_back(key);
      it->second.agg = pool(it->second.agg, a);
    }
  }
  std::sort(sources.begin(), sources.end());
  Fnv1a h;
  for (const auto& s : sources) h.update(fnv1a(s));
  std::string out = "# config_hash=" + hex64(h.digest()) + "\n# sources=";
  for (std::size_t i = 0; i < sources.size(); ++i) out += (i ? "|" : "") + sources[i];
  out += "\n" + std::string(kCorrelatorCsvHeader) + "\n";
  for (const auto& key : order) {
    auto g = groups[key];
    auto& cells = g.proto;
    const bool plugin = cells[c_est] == "plugin";
    const double value = plugin ? std::exp(-g.agg.mean) : g.agg.mean;
    const double se = plugin ? value * g.agg.std_error : g.agg.std_error;
    cells[c_rep] = std::to_string(g.agg.replica_count);
    cells[c_val] = format17(value);
    cells[c_se] = format17(se);
    if (!cells[c_or].empty()) cells[c_z] = format17(zscore(value, std::stod(cells[c_or]), se));
    std::string row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const bool quote = cells[i].find(',') != std::string::npos;
      row += (i ? "," : "") + (quote ? "\"" + cells[i] + "\"" : cells[i]);
    }
    out += row + "\n";
  }
  if (f.out) write_file(fs::path(*f.out) / "report.csv", out);
  std::cout << out;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loop soups, their occupation fields and correlators."};
  app.require_subcommand(1);
  Flags flags;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", flags.config, "configuration file");
    s->add_option("--seed", flags.seed, "master seed");
    s->add_option("--replicas", flags.replicas, "number of replicas");
    s->add_option("--workers", flags.workers, "worker threads (default: LOOPSOUP_WORKERS, then all cores)");
    s->add_option("--out", flags.out, "output directory");
  };
  auto* sample = app.add_subcommand("sample", "sample soup realizations");
  auto* estimate = app.add_subcommand("estimate", "estimate a layering or winding correlator");
  auto* gff = app.add_subcommand("gff", "occupation field of the lattice soup against the free field");
  auto* clus = app.add_subcommand("clusters", "cluster survival curve of a (massive) soup");
  auto* verify = app.add_subcommand("verify", "run acceptance checks");
  auto* report = app.add_subcommand("report", "pool estimate CSVs");
  for (auto* s : {sample, estimate, gff, clus, verify}) add_common(s);
  std::string suite = "exact";
  double scale = 1.0;
  verify->add_option("--suite", suite, "suite name, or 'all'");
  verify->add_option("--scale", scale, "multiplies every replica count")->check(CLI::PositiveNumber);
  std::vector<std::string> files;
  report->add_option("files", files, "estimate CSV files")->required();
  report->add_option("--out", flags.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    if (*sample) return cmd_sample(flags);
    if (*estimate) return cmd_estimate(flags);
    if (*gff) return cmd_gff(flags);
    if (*clus) return cmd_clusters(flags);
    if (*verify) return cmd_verify(suite, flags, scale);
    if (*report) return cmd_report(files, flags);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const Refusal& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid request: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
