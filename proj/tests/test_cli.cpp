#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;
using namespace parkctl;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "parkctl");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Result r;
  r.code = run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string run_dir(const Result& r) {
  std::string s = r.out;
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  const auto nl = s.rfind('\n');
  return nl == std::string::npos ? s : s.substr(nl + 1);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "parkctl_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

CsvTable table(const fs::path& p) {
  std::ifstream in(p);
  return read_csv(in, p.string());
}

bool single_error_line(const Result& r) {
  return r.err.rfind("parkctl: error: ", 0) == 0 && std::count(r.err.begin(), r.err.end(), '\n') == 1;
}

}  // namespace

TEST_CASE("argument helpers") {
  parkrl::GridSpec g;
  parse_grid("7x7", g);
  CHECK(g.rows == 7);
  CHECK(g.cols == 7);
  parse_grid("2x5", g);
  CHECK(g.rows == 2);
  CHECK(g.cols == 5);
  CHECK_THROWS_AS(parse_grid("7by7", g), CliError);
  CHECK_THROWS_AS(parse_grid("0x3", g), CliError);
  CHECK(parse_seeds("1-3,7") == std::vector<std::uint64_t>{1, 2, 3, 7});
  CHECK(parse_seeds("4") == std::vector<std::uint64_t>{4});
  CHECK_THROWS_AS(parse_seeds("3-1"), CliError);
  CHECK_THROWS_AS(parse_seeds("x"), CliError);
  CHECK(split_list("no_pa, s_pa(3),c_pa") == std::vector<std::string>{"no_pa", "s_pa(3)", "c_pa"});
  CHECK(policy_tag("s_pa(3)") == "s_pa3");
}

TEST_CASE("config round trip and errors") {
  const Config def;
  const std::string text = render_config(def);
  std::istringstream in(text);
  const Config back = parse_config(in, "x.ini");
  CHECK(render_config(back) == text);
  CHECK(back.scenario.demand.rate_per_min == 90.0);
  CHECK(back.scenario.demand.parking_probability == 0.2);
  CHECK(back.scenario.demand.mean_duration == 600.0);
  CHECK(back.scenario.grid.rows == 3);

  // Drop one key.
  std::string missing;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line))
    if (line.rfind("rate", 0) != 0) missing += line + "\n";
  std::istringstream m(missing);
  try {
    parse_config(m, "x.ini");
    FAIL("expected CliError");
  } catch (const CliError& e) {
    CHECK(e.code() == 2);
    CHECK(std::string(e.what()).find("rate") != std::string::npos);
  }

  std::istringstream dup(text + "[grid]\nrows = 4\n");
  CHECK_THROWS_AS(parse_config(dup, "x.ini"), CliError);
  std::istringstream unknown(text + "[grid]\nwidth = 4\n");
  CHECK_THROWS_AS(parse_config(unknown, "x.ini"), CliError);
}

TEST_CASE("usage errors exit with code 2 on one line") {
  Result a = invoke({});
  CHECK(a.code == 2);
  Result b = invoke({"frobnicate"});
  CHECK(b.code == 2);
  CHECK(single_error_line(b));
  Result c = invoke({"eval", "--policy", "d_pa", "--out", scratch().string()});
  CHECK(c.code == 2);
  CHECK(single_error_line(c));
  Result d = invoke({"sweep", "--param", "colour", "--values", "1", "--out", scratch().string()});
  CHECK(d.code == 2);
  CHECK(single_error_line(d));

  const fs::path cfg = scratch() / "broken.ini";
  std::string text = render_config(Config{});
  text.erase(text.find("walk_threshold"), text.find('\n', text.find("walk_threshold")) - text.find("walk_threshold") + 1);
  spit(cfg, text);
  Result e = invoke({"gen", "--config", cfg.string(), "--out", scratch().string()});
  CHECK(e.code == 2);
  CHECK(single_error_line(e));
  CHECK(e.err.find("walk_threshold") != std::string::npos);
}

TEST_CASE("gen writes the default scenario") {
  Result r = invoke({"gen", "--out", (scratch() / "gen").string()});
  REQUIRE(r.code == 0);
  const fs::path dir = run_dir(r);
  for (const char* f : {"config.ini", "network.json", "schedule.csv", "manifest.json"})
    CHECK(fs::exists(dir / f));
  const Config cfg = load_config(dir.string());
  CHECK(cfg.scenario.grid.rows == 3);
  CHECK(cfg.scenario.demand.rate_per_min == 90.0);
  const auto net = nlohmann::json::parse(slurp(dir / "network.json"));
  const auto oracle = parkrl::build_grid({});
  CHECK(net["lanes"].size() == oracle.lanes().size());
  CHECK(net["spaces"].get<std::size_t>() == oracle.spaces().size());

  Result big = invoke({"gen", "--grid", "7x7", "--out", (scratch() / "gen").string()});
  REQUIRE(big.code == 0);
  parkrl::GridSpec spec;
  spec.rows = spec.cols = 7;
  const auto oracle7 = parkrl::build_grid(spec);
  const auto net7 = nlohmann::json::parse(slurp(fs::path(run_dir(big)) / "network.json"));
  CHECK(net7["lanes"].size() == oracle7.lanes().size());
  CHECK(net7["blocks"].size() == oracle7.blocks().size());
  CHECK(run_dir(big) != run_dir(r));
}

TEST_CASE("train, resume and evaluate with a checkpoint") {
  const fs::path base = scratch() / "train";
  const std::string ckpt = (base / "agent.bin").string();
  fs::create_directories(base);
  Result t = invoke({"train", "--episodes", "1", "--horizon", "300", "--checkpoint", ckpt,
                     "--out", base.string()});
  REQUIRE(t.code == 0);
  const CsvTable log1 = table(fs::path(run_dir(t)) / "train_log.csv");
  REQUIRE(log1.rows.size() == 3);
  const int loss = log1.column("loss");
  const int epoch = log1.column("epoch");
  for (const auto& row : log1.rows)
    if (!row[static_cast<std::size_t>(loss)].empty()) CHECK(std::isfinite(std::stod(row[static_cast<std::size_t>(loss)])));

  Result t2 = invoke({"train", "--episodes", "1", "--horizon", "300", "--checkpoint", ckpt,
                      "--resume", "--out", base.string()});
  REQUIRE(t2.code == 0);
  const CsvTable log2 = table(fs::path(run_dir(t2)) / "train_log.csv");
  REQUIRE(log2.rows.size() == 3);
  CHECK(std::stol(log2.rows.front()[static_cast<std::size_t>(epoch)]) ==
        std::stol(log1.rows.back()[static_cast<std::size_t>(epoch)]) + 1);
  CHECK(log2.rows.front()[static_cast<std::size_t>(log2.column("episode"))] == "1");

  Result e = invoke({"eval", "--policy", "no_pa,s_pa(3),c_pa,d_pa", "--seeds", "1-5", "--horizon", "300",
                     "--checkpoint", ckpt, "--out", base.string()});
  REQUIRE(e.code == 0);
  const CsvTable sum = table(fs::path(run_dir(e)) / "summary.csv");
  CHECK(sum.rows.size() == 20);
  const int pol = sum.column("policy"), pct = sum.column("tloss_pct");
  for (const auto& row : sum.rows)
    if (row[static_cast<std::size_t>(pol)] == "no_pa") CHECK(std::stod(row[static_cast<std::size_t>(pct)]) == 0.0);

  const fs::path bad = base / "corrupt.bin";
  spit(bad, "PKRLQNET garbage");
  Result c = invoke({"eval", "--policy", "d_pa", "--horizon", "300", "--checkpoint", bad.string(),
                     "--out", base.string()});
  CHECK(c.code == 1);
  CHECK(single_error_line(c));
}

TEST_CASE("training keeps the best validated agent") {
  const fs::path base = scratch() / "select";
  fs::create_directories(base);
  Result t = invoke({"train", "--episodes", "3", "--horizon", "300", "--select-every", "1",
                     "--val-seeds", "4,5", "--out", base.string()});
  REQUIRE(t.code == 0);
  const fs::path dir = run_dir(t);
  const CsvTable v = table(dir / "validation.csv");
  REQUIRE(v.rows.size() == 3);
  const int kept = v.column("kept"), tl = v.column("mean_tloss_s"), ep = v.column("episode");
  CHECK(v.rows.front()[static_cast<std::size_t>(kept)] == "1");
  std::string best_tloss;
  for (const auto& row : v.rows)
    if (row[static_cast<std::size_t>(kept)] == "1") best_tloss = row[static_cast<std::size_t>(tl)];
  CHECK(v.rows.back()[static_cast<std::size_t>(ep)] == "2");
  REQUIRE(fs::exists(dir / "best.bin"));

  Result e = invoke({"eval", "--policy", "d_pa", "--seeds", "4,5", "--horizon", "300", "--checkpoint",
                     (dir / "best.bin").string(), "--out", base.string()});
  REQUIRE(e.code == 0);
  const CsvTable sum = table(fs::path(run_dir(e)) / "summary.csv");
  const int pol = sum.column("policy"), mt = sum.column("mean_tloss_s");
  double total = 0.0;
  int n = 0;
  for (const auto& row : sum.rows)
    if (row[static_cast<std::size_t>(pol)] == "d_pa") {
      total += std::stod(row[static_cast<std::size_t>(mt)]);
      ++n;
    }
  REQUIRE(n == 2);
  // Both sides are printed with six decimals.
  CHECK(std::abs(total / n - std::stod(best_tloss)) < 2e-6);

  Result bad = invoke({"train", "--episodes", "1", "--horizon", "300", "--select-every", "-1",
                       "--out", base.string()});
  CHECK(bad.code == 2);
  CHECK(single_error_line(bad));
}

TEST_CASE("evaluation is reproducible byte for byte") {
  const fs::path base = scratch() / "repro";
  auto once = [&] {
    Result r = invoke({"eval", "--seeds", "3", "--horizon", "900", "--out", base.string()});
    REQUIRE(r.code == 0);
    return fs::path(run_dir(r));
  };
  const fs::path a = once(), b = once();
  REQUIRE(a != b);
  CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));
  int files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("vehicles_", 0) != 0) continue;
    ++files;
    CHECK(slurp(entry.path()) == slurp(b / name));
  }
  CHECK(files == 3);
}

TEST_CASE("sweep rows and agreement with eval") {
  const fs::path base = scratch() / "sweep";
  Result s = invoke({"sweep", "--param", "parking_probability", "--values", "0.1,0.2,0.3,0.4",
                     "--policy", "no_pa,s_pa(3)", "--seeds", "2", "--horizon", "600", "--out",
                     base.string()});
  REQUIRE(s.code == 0);
  const CsvTable sw = table(fs::path(run_dir(s)) / "sweep.csv");
  CHECK(sw.rows.size() == 8);
  CHECK(sw.header[0] == "param");

  Result one = invoke({"sweep", "--param", "rate", "--values", "90", "--policy", "no_pa,s_pa(3)",
                       "--seeds", "2", "--horizon", "600", "--out", base.string()});
  Result ev = invoke({"eval", "--policy", "no_pa,s_pa(3)", "--seeds", "2", "--horizon", "600",
                      "--out", base.string()});
  REQUIRE(one.code == 0);
  REQUIRE(ev.code == 0);
  const std::string sweep_csv = slurp(fs::path(run_dir(one)) / "sweep.csv");
  std::istringstream in(sweep_csv);
  std::string line, stripped;
  while (std::getline(in, line)) stripped += line.substr(line.find(',', line.find(',') + 1) + 1) + "\n";
  CHECK(stripped == slurp(fs::path(run_dir(ev)) / "summary.csv"));

  // Re-aggregate one sweep row from its per-vehicle CSV.
  const fs::path veh = fs::path(run_dir(s)) / "vehicles_0.3_s_pa3_2.csv";
  REQUIRE(fs::exists(veh));
  const CsvTable v = table(veh);
  double n = 0, loss = 0;
  for (const auto& row : v.rows)
    if (row[static_cast<std::size_t>(v.column("completed"))] == "1") {
      n += 1;
      loss += std::stod(row[static_cast<std::size_t>(v.column("time_loss_s"))]);
    }
  bool found = false;
  for (const auto& row : sw.rows)
    if (row[1] == "0.3" && row[static_cast<std::size_t>(sw.column("policy"))] == "s_pa(3)") {
      found = true;
      CHECK(std::stod(row[static_cast<std::size_t>(sw.column("mean_tloss_s"))]) == doctest::Approx(loss / n).epsilon(1e-6));
    }
  CHECK(found);
}

TEST_CASE("plots are deterministic and cover the data") {
  const fs::path base = scratch() / "plot";
  fs::create_directories(base);
  const fs::path csv = base / "summary.csv";
  spit(csv,
       "policy,seed,n,mean_tloss_s,tloss_pct,mean_walk_m,ttc_s,twc_m,objective,incomplete,mean_walk_parkers_m\n"
       "no_pa,1,10,40.000000,0.000000,1.0,100,1,100,0,5\n"
       "s_pa(3),1,10,30.000000,25.000000,1.0,100,1,100,0,5\n"
       "no_pa,2,10,44.000000,0.000000,1.0,100,1,100,0,5\n"
       "s_pa(3),2,10,31.000000,29.500000,1.0,100,1,100,0,5\n");
  Result a = invoke({"plot", "--input", csv.string(), "--out", base.string()});
  Result b = invoke({"plot", "--input", csv.string(), "--out", base.string()});
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const std::string svg = slurp(fs::path(run_dir(a)) / "summary.svg");
  CHECK(svg == slurp(fs::path(run_dir(b)) / "summary.svg"));
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(fs::exists(fs::path(run_dir(a)) / "summary.csv"));
  // Y tick labels span the per-point means (30 and 44).
  std::vector<double> ticks;
  const std::string key = "text-anchor=\"end\">";
  for (auto pos = svg.find(key); pos != std::string::npos; pos = svg.find(key, pos + 1)) {
    const auto start = pos + key.size();
    ticks.push_back(std::stod(svg.substr(start, svg.find('<', start) - start)));
  }
  REQUIRE(ticks.size() >= 2);
  CHECK(*std::min_element(ticks.begin(), ticks.end()) <= 30.0);
  CHECK(*std::max_element(ticks.begin(), ticks.end()) >= 44.0);

  const fs::path single = base / "one.csv";
  spit(single,
       "policy,seed,n,mean_tloss_s,tloss_pct,mean_walk_m,ttc_s,twc_m,objective,incomplete,mean_walk_parkers_m\n"
       "no_pa,1,10,40.000000,0.000000,1.0,100,1,100,0,5\n");
  CHECK(invoke({"plot", "--input", single.string(), "--out", base.string()}).code == 0);

  const fs::path bad = base / "bad.csv";
  spit(bad, "policy,seed\nno_pa\n");
  Result c = invoke({"plot", "--input", bad.string(), "--out", base.string()});
  CHECK(c.code != 0);
  CHECK(single_error_line(c));
}
