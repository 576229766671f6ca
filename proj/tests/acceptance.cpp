// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
//
//   loopsoup_acceptance [--only SUITE] [--scale X] [--out DIR] [--seed N]
//
// Criterion 12 reruns each suite with one worker and compares the CSV with the
// eight-worker run byte for byte.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "loopsoup/acceptance.hpp"

namespace acc = loopsoup::acceptance;

int main(int argc, char** argv) {
  acc::Settings base;
  std::vector<std::string> names = acc::full_run();
  std::filesystem::path out = "acceptance_results";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value for " << a << "\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--only") names = {next()};
    else if (a == "--scale") base.scale = std::stod(next());
    else if (a == "--out") out = next();
    else if (a == "--seed") base.seed = std::stoull(next());
    else {
      std::cerr << "unknown argument " << a << "\n";
      return 2;
    }
  }
  std::filesystem::create_directories(out);

  std::vector<acc::CriterionReport> all;
  std::vector<std::string> csv8;
  for (const auto& n : names) {
    const acc::Suite* s = acc::find_suite(n);
    if (!s) {
      std::cerr << "unknown suite " << n << "\n";
      return 2;
    }
    acc::Settings st = base;
    st.workers = 8;
    const auto reps = s->run(st);
    std::cout << acc::table(reps) << std::flush;
    csv8.push_back(acc::csv_of(reps));
    std::ofstream(out / (n + ".csv")) << csv8.back();
    all.insert(all.end(), reps.begin(), reps.end());
  }

  loopsoup::Stopwatch sw;
  acc::CriterionReport repro{12, "reproducibility across worker counts"};
  for (std::size_t k = 0; k < names.size(); ++k) {
    acc::Settings st = base;
    st.workers = 1;
    const std::string csv1 = acc::csv_of(acc::find_suite(names[k])->run(st));
    std::ofstream(out / (names[k] + ".workers1.csv")) << csv1;
    repro.checks.push_back(acc::holds(names[k] + " CSV identical at 1 and 8 workers", csv1 == csv8[k]));
  }
  repro.seconds = sw.seconds();
  std::cout << acc::table({repro});
  all.push_back(repro);

  std::cout << "\nsummary\n";
  bool ok = true;
  for (const auto& r : all) {
    std::printf("%s %2d %s\n", r.pass() ? "PASS" : "FAIL", r.id, r.title.c_str());
    ok = ok && r.pass();
  }
  return ok ? 0 : 1;
}
