#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>

#include "parkrl/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace parkrl;

namespace parkctl {

namespace {

int log_level() {
  const char* v = std::getenv("PARKRL_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "quiet" || s == "0") return 0;
  if (s == "debug" || s == "2") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "parkctl: " << msg << '\n';
}
void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "parkctl: " << msg << '\n';
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& s) {
  if (s.empty()) throw std::invalid_argument("empty value");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
    throw std::invalid_argument("'" + s + "' is not a number");
  return v;
}

long to_long(const std::string& s) {
  if (s.empty()) throw std::invalid_argument("empty value");
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE)
    throw std::invalid_argument("'" + s + "' is not an integer");
  return v;
}

int to_int(const std::string& s) {
  const long v = to_long(s);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw std::invalid_argument("'" + s + "' is out of range");
  return static_cast<int>(v);
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("'" + s + "' is not a boolean");
}

std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

int phase_green(const SignalPlan& p, std::size_t k) {
  return k < p.phases.size() ? p.phases[k].duration : 0;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"grid", "layout",
       [](Config& c, const std::string& v) {
         if (v == "grid") c.scenario.layout = Layout::grid;
         else if (v == "single") c.scenario.layout = Layout::single;
         else throw std::invalid_argument("layout must be 'grid' or 'single'");
       },
       [](const Config& c) { return std::string(c.scenario.layout == Layout::grid ? "grid" : "single"); }},
      {"grid", "rows", [](Config& c, const std::string& v) { c.scenario.grid.rows = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.grid.rows); }},
      {"grid", "cols", [](Config& c, const std::string& v) { c.scenario.grid.cols = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.grid.cols); }},
      {"grid", "lane_length",
       [](Config& c, const std::string& v) { c.scenario.grid.lane_length = to_double(v); },
       [](const Config& c) { return num(c.scenario.grid.lane_length); }},
      {"grid", "spaces_per_lane",
       [](Config& c, const std::string& v) { c.scenario.grid.spaces_per_lane = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.grid.spaces_per_lane); }},
      {"grid", "speed", [](Config& c, const std::string& v) { c.scenario.grid.speed = to_double(v); },
       [](const Config& c) { return num(c.scenario.grid.speed); }},

      {"signals", "ns_green",
       [](Config& c, const std::string& v) {
         auto& s = c.scenario.grid.signals;
         s = SignalPlan::two_phase(to_int(v), phase_green(s, 1), s.offset);
       },
       [](const Config& c) { return std::to_string(phase_green(c.scenario.grid.signals, 0)); }},
      {"signals", "ew_green",
       [](Config& c, const std::string& v) {
         auto& s = c.scenario.grid.signals;
         s = SignalPlan::two_phase(phase_green(s, 0), to_int(v), s.offset);
       },
       [](const Config& c) { return std::to_string(phase_green(c.scenario.grid.signals, 1)); }},
      {"signals", "offset",
       [](Config& c, const std::string& v) { c.scenario.grid.signals.offset = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.grid.signals.offset); }},

      {"parking", "probability",
       [](Config& c, const std::string& v) { c.scenario.demand.parking_probability = to_double(v); },
       [](const Config& c) { return num(c.scenario.demand.parking_probability); }},
      {"parking", "mean_duration",
       [](Config& c, const std::string& v) { c.scenario.demand.mean_duration = to_double(v); },
       [](const Config& c) { return num(c.scenario.demand.mean_duration); }},
      {"parking", "walk_threshold",
       [](Config& c, const std::string& v) { c.scenario.sim.walk_threshold = to_double(v); },
       [](const Config& c) { return num(c.scenario.sim.walk_threshold); }},
      {"parking", "preoccupied",
       [](Config& c, const std::string& v) { c.scenario.preoccupied = to_bool(v); },
       [](const Config& c) { return std::string(c.scenario.preoccupied ? "true" : "false"); }},

      {"demand", "rate",
       [](Config& c, const std::string& v) { c.scenario.demand.rate_per_min = to_double(v); },
       [](const Config& c) { return num(c.scenario.demand.rate_per_min); }},
      {"demand", "train_horizon", [](Config& c, const std::string& v) { c.train_horizon = to_double(v); },
       [](const Config& c) { return num(c.train_horizon); }},
      {"demand", "eval_horizon", [](Config& c, const std::string& v) { c.eval_horizon = to_double(v); },
       [](const Config& c) { return num(c.eval_horizon); }},

      {"control", "t_l", [](Config& c, const std::string& v) { c.scenario.control.t_l = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.control.t_l); }},
      {"control", "t_b", [](Config& c, const std::string& v) { c.scenario.control.t_b = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.control.t_b); }},
      {"control", "th_o", [](Config& c, const std::string& v) { c.scenario.control.th_o = to_double(v); },
       [](const Config& c) { return num(c.scenario.control.th_o); }},
      {"control", "th_c", [](Config& c, const std::string& v) { c.scenario.control.th_c = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.control.th_c); }},
      {"control", "sample_period",
       [](Config& c, const std::string& v) { c.scenario.control.sample_period = to_int(v); },
       [](const Config& c) { return std::to_string(c.scenario.control.sample_period); }},

      {"training", "alpha", [](Config& c, const std::string& v) { c.training.alpha = to_double(v); },
       [](const Config& c) { return num(c.training.alpha); }},
      {"training", "beta", [](Config& c, const std::string& v) { c.training.beta = to_double(v); },
       [](const Config& c) { return num(c.training.beta); }},
      {"training", "gamma", [](Config& c, const std::string& v) { c.training.gamma = to_double(v); },
       [](const Config& c) { return num(c.training.gamma); }},
      {"training", "lr", [](Config& c, const std::string& v) { c.training.lr = to_double(v); },
       [](const Config& c) { return num(c.training.lr); }},
      {"training", "batch", [](Config& c, const std::string& v) { c.training.batch = to_int(v); },
       [](const Config& c) { return std::to_string(c.training.batch); }},
      {"training", "replay_capacity",
       [](Config& c, const std::string& v) {
         const long n = to_long(v);
         if (n <= 0) throw std::invalid_argument("must be > 0");
         c.training.replay_capacity = static_cast<std::size_t>(n);
       },
       [](const Config& c) { return std::to_string(c.training.replay_capacity); }},
      {"training", "eps_start", [](Config& c, const std::string& v) { c.training.eps_start = to_double(v); },
       [](const Config& c) { return num(c.training.eps_start); }},
      {"training", "eps_end", [](Config& c, const std::string& v) { c.training.eps_end = to_double(v); },
       [](const Config& c) { return num(c.training.eps_end); }},
      {"training", "eps_decay", [](Config& c, const std::string& v) { c.training.eps_decay = to_long(v); },
       [](const Config& c) { return std::to_string(c.training.eps_decay); }},
      {"training", "target_sync",
       [](Config& c, const std::string& v) { c.training.target_sync = to_long(v); },
       [](const Config& c) { return std::to_string(c.training.target_sync); }},
      {"training", "dropout", [](Config& c, const std::string& v) { c.training.dropout = to_double(v); },
       [](const Config& c) { return num(c.training.dropout); }},
      {"training", "reward_scale",
       [](Config& c, const std::string& v) { c.training.reward_scale = to_double(v); },
       [](const Config& c) { return num(c.training.reward_scale); }},
      {"training", "updates_per_epoch",
       [](Config& c, const std::string& v) { c.training.updates_per_epoch = to_int(v); },
       [](const Config& c) { return std::to_string(c.training.updates_per_epoch); }},
  };
  return f;
}

void validate(const Config& c, const std::string& name) {
  try {
    if (c.scenario.grid.rows < 1 || c.scenario.grid.cols < 1)
      throw ConfigError("grid", "rows and cols must be >= 1");
    if (!(c.train_horizon > 0.0)) throw ConfigError("train_horizon", "must be > 0");
    if (!(c.eval_horizon > 0.0)) throw ConfigError("eval_horizon", "must be > 0");
    c.scenario.control.validate();
    c.training.validate();
  } catch (const ConfigError& e) {
    throw CliError(2, "config", name + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------- config files

Config parse_config(std::istream& is, const std::string& name) {
  Config cfg;
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = name + ":" + std::to_string(lineno);
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw CliError(2, "config", where + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      const bool known = std::any_of(fields().begin(), fields().end(),
                                     [&](const Field& f) { return section == f.section; });
      if (!known) throw CliError(2, "config", where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw CliError(2, "config", where + ": expected key = value");
    if (section.empty()) throw CliError(2, "config", where + ": key outside any section");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) {
      return section == f.section && key == f.key;
    });
    if (it == fields().end())
      throw CliError(2, "config", where + ": unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert({section, key}).second)
      throw CliError(2, "config", where + ": duplicate key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const std::exception& e) {
      throw CliError(2, "config", where + ": " + key + ": " + e.what());
    }
  }
  for (const Field& f : fields())
    if (!seen.count({f.section, f.key}))
      throw CliError(2, "config",
                     name + ": missing key '" + f.key + "' in [" + f.section + "]");
  validate(cfg, name);
  return cfg;
}

Config load_config(const std::string& path) {
  std::string file = path;
  if (fs::is_directory(path)) file = (fs::path(path) / "config.ini").string();
  std::ifstream is(file);
  if (!is) throw CliError(2, "config", "cannot open config " + file);
  return parse_config(is, file);
}

std::string render_config(const Config& cfg) {
  std::ostringstream os;
  std::string section;
  for (const Field& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

void parse_grid(const std::string& text, GridSpec& grid) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("");
    const int r = to_int(text.substr(0, x));
    const int c = to_int(text.substr(x + 1));
    if (r < 1 || c < 1) throw std::invalid_argument("");
    grid.rows = r;
    grid.cols = c;
  } catch (const std::invalid_argument&) {
    throw CliError(2, "usage", "--grid expects ROWSxCOLS, got '" + text + "'");
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char ch : text) {
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (ch == ',' && depth == 0) {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  try {
    for (const std::string& item : split_list(text)) {
      const auto dash = item.find('-', 1);
      if (dash == std::string::npos) {
        const long v = to_long(item);
        if (v < 0) throw std::invalid_argument("");
        out.push_back(static_cast<std::uint64_t>(v));
      } else {
        const long a = to_long(item.substr(0, dash));
        const long b = to_long(item.substr(dash + 1));
        if (a < 0 || b < a) throw std::invalid_argument("");
        for (long s = a; s <= b; ++s) out.push_back(static_cast<std::uint64_t>(s));
      }
    }
  } catch (const std::invalid_argument&) {
    throw CliError(2, "usage", "bad seed list '" + text + "'");
  }
  if (out.empty()) throw CliError(2, "usage", "empty seed list");
  return out;
}

std::string make_run_dir(const std::string& base, const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  std::error_code ec;
  fs::create_directories(base, ec);
  if (ec) throw CliError(1, "io", "cannot create " + base + ": " + ec.message());
  const fs::path stem = fs::path(base) / (command + "-" + stamp);
  for (int k = 1;; ++k) {
    const fs::path dir = k == 1 ? stem : fs::path(stem.string() + "-" + std::to_string(k));
    if (fs::create_directory(dir, ec)) return dir.string();
    if (ec) throw CliError(1, "io", "cannot create " + dir.string() + ": " + ec.message());
  }
}

std::string policy_tag(const std::string& policy) {
  std::string out;
  for (char ch : policy)
    if (ch != '(' && ch != ')') out += ch;
  return out;
}

// ---------------------------------------------------------------- csv + plot

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

CsvTable read_csv(std::istream& is, const std::string& name) {
  CsvTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw CliError(1, "input", name + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(t.header.size()) + " fields, got " +
                                     std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw CliError(1, "input", name + ": empty CSV");
  return t;
}

std::string render_plot(const CsvTable& table, const std::string& title) {
  const int pc = table.column("policy");
  const int yc = table.column("mean_tloss_s");
  int xc = table.column("value");
  std::string xlabel = "value";
  if (xc < 0) {
    xc = table.column("seed");
    xlabel = "seed";
  } else if (const int p = table.column("param"); p >= 0 && !table.rows.empty()) {
    xlabel = table.rows.front()[static_cast<std::size_t>(p)];
  }
  if (pc < 0 || yc < 0 || xc < 0)
    throw CliError(1, "input", "CSV needs policy, mean_tloss_s and value or seed columns");

  // series -> x -> (sum, count), series in first-seen order
  std::vector<std::string> order;
  std::map<std::string, std::map<double, std::pair<double, int>>> acc;
  for (const auto& row : table.rows) {
    const std::string& pol = row[static_cast<std::size_t>(pc)];
    double x = 0.0;
    double y = 0.0;
    try {
      const std::string& xs = row[static_cast<std::size_t>(xc)];
      std::size_t used = 0;
      x = std::stod(xs, &used);
      y = to_double(row[static_cast<std::size_t>(yc)]);
    } catch (const std::exception&) {
      throw CliError(1, "input", "non-numeric value in plot columns");
    }
    if (!acc.count(pol)) order.push_back(pol);
    auto& cell = acc[pol][x];
    cell.first += y;
    cell.second += 1;
  }
  if (order.empty()) throw CliError(1, "input", "CSV has no data rows");

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& [pol, pts] : acc)
    for (const auto& [x, sc] : pts) {
      const double y = sc.first / sc.second;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 - x0 < 1e-12) {
    x0 -= 1.0;
    x1 += 1.0;
  }
  const double ypad = y1 - y0 < 1e-12 ? 1.0 : 0.05 * (y1 - y0);
  y0 -= ypad;
  y1 += ypad;

  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  auto f = [](double v, const char* fmt = "%.2f") {
    char buf[48];
    std::snprintf(buf, sizeof buf, fmt, v);
    return std::string(buf);
  };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << f(sx(xv)) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\">" << f(xv, "%.4g") << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << f(sy(yv) + 4) << "\" text-anchor=\"end\">"
       << f(yv, "%.4g") << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
     << xlabel << "</text>\n";
  os << "<text transform=\"translate(18," << (T + H - B) / 2
     << ") rotate(-90)\" text-anchor=\"middle\">mean time loss (s)</text>\n";
  for (std::size_t s = 0; s < order.size(); ++s) {
    const char* colour = palette[s % 8];
    const auto& pts = acc[order[s]];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& [x, sc] : pts) {
      os << (first ? "" : " ") << f(sx(x)) << ',' << f(sy(sc.first / sc.second));
      first = false;
    }
    os << "\"/>\n";
    for (const auto& [x, sc] : pts)
      os << "<circle cx=\"" << f(sx(x)) << "\" cy=\"" << f(sy(sc.first / sc.second))
         << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32
       << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << order[s] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------- checkpoint selection

namespace {

std::pair<double, double> greedy_means(const RoadNetwork& net, Scenario sc, const char* policy,
                                       DqnAgent* agent, const std::vector<std::uint64_t>& seeds) {
  sc.control.policy = PolicySpec::parse(policy);
  double tloss = 0.0, walk = 0.0;
  for (std::uint64_t seed : seeds) {
    const auto r = run_episode(net, sc, seed, agent, false);
    const MetricsSummary m = summarize(collect_records(*r.sim), 1.0, 0.0);
    tloss += m.mean_tloss;
    walk += m.mean_walk_parkers;
  }
  const double n = static_cast<double>(seeds.size());
  return {tloss / n, walk / n};
}

}  // namespace

CheckpointSelector::CheckpointSelector(const RoadNetwork& net, Scenario sc,
                                       std::vector<std::uint64_t> seeds, double max_extra_walk,
                                       double beta)
    : m_net(&net), m_sc(std::move(sc)), m_seeds(std::move(seeds)),
      m_max_extra_walk(max_extra_walk), m_beta(beta) {
  if (m_seeds.empty()) throw CliError(2, "usage", "validation needs at least one seed");
  std::tie(m_ref_tloss, m_ref_walk) = greedy_means(*m_net, m_sc, "no_pa", nullptr, m_seeds);
}

ValidationScore CheckpointSelector::consider(long episode, DqnAgent& agent) {
  ValidationScore v;
  std::tie(v.tloss, v.walk) = greedy_means(*m_net, m_sc, "d_pa", &agent, m_seeds);
  v.ref_tloss = m_ref_tloss;
  v.ref_walk = m_ref_walk;
  auto rank = [&](const ValidationScore& x) {
    const bool ok = x.extra_walk() <= m_max_extra_walk;
    return std::pair{ok ? 0 : 1, ok ? x.tloss : x.tloss + m_beta * x.extra_walk()};
  };
  if (m_best.empty() || rank(v) < rank(m_best_score)) {
    std::ostringstream os;
    agent.save(os);
    m_best = os.str();
    m_best_episode = episode;
    m_best_score = v;
  }
  return v;
}

void CheckpointSelector::restore(DqnAgent& agent) const {
  if (m_best.empty()) throw CliError(1, "usage", "no checkpoint has been validated");
  std::istringstream is(m_best);
  agent.load(is);
}

void CheckpointSelector::save_best(const std::string& path) const {
  if (m_best.empty()) throw CliError(1, "usage", "no checkpoint has been validated");
  write_file_atomic(path, m_best);
}

// ---------------------------------------------------------------- commands

namespace {

struct Overrides {
  std::string config;
  std::string grid;
  std::optional<double> rate, prob, duration, alpha, beta, horizon;
};

void add_scenario_options(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "scenario config (INI file or a gen output directory)");
  app->add_option("--grid", o.grid, "grid size ROWSxCOLS");
  app->add_option("--rate", o.rate, "arrival rate, vehicles per minute");
  app->add_option("--prob", o.prob, "parking probability");
  app->add_option("--duration", o.duration, "mean parking duration, seconds");
  app->add_option("--alpha", o.alpha, "time-loss weight");
  app->add_option("--beta", o.beta, "walking-distance weight");
  app->add_option("--horizon", o.horizon, "episode length, seconds");
}

Config resolve(const Overrides& o) {
  Config cfg = o.config.empty() ? Config{} : load_config(o.config);
  if (!o.grid.empty()) parse_grid(o.grid, cfg.scenario.grid);
  if (o.rate) cfg.scenario.demand.rate_per_min = *o.rate;
  if (o.prob) cfg.scenario.demand.parking_probability = *o.prob;
  if (o.duration) cfg.scenario.demand.mean_duration = *o.duration;
  if (o.alpha) cfg.training.alpha = *o.alpha;
  if (o.beta) cfg.training.beta = *o.beta;
  if (o.horizon) cfg.train_horizon = cfg.eval_horizon = *o.horizon;
  validate(cfg, "options");
  return cfg;
}

json scenario_json(const Config& cfg) {
  json j;
  std::istringstream is(render_config(cfg));
  std::string line, section;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    j[section][line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

void write_manifest(const std::string& dir, json manifest) {
  write_file_atomic((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

RoadNetwork make_network(const Config& cfg) {
  try {
    return build_network(cfg.scenario);
  } catch (const ConfigError& e) {
    throw CliError(2, "config", e.what());
  }
}

json network_json(const RoadNetwork& net) {
  json j;
  j["nodes"] = json::array();
  for (const auto& n : net.nodes())
    j["nodes"].push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}, {"signalized", n.signalized}});
  j["lanes"] = json::array();
  for (const auto& l : net.lanes()) {
    const char* kind = l.kind == LaneKind::internal ? "internal"
                       : l.kind == LaneKind::entry  ? "entry"
                                                    : "exit";
    j["lanes"].push_back({{"id", l.id},
                          {"from", l.from},
                          {"to", l.to},
                          {"length", l.length},
                          {"speed", l.free_flow_speed},
                          {"heading", to_string(l.heading)},
                          {"kind", kind},
                          {"block", l.owner_block},
                          {"spaces", l.spaces}});
  }
  j["blocks"] = json::array();
  for (const auto& b : net.blocks())
    j["blocks"].push_back({{"id", b.id}, {"lanes", b.lanes}, {"boundary", b.boundary}});
  j["spaces"] = net.spaces().size();
  return j;
}

int cmd_gen(const Overrides& o, std::uint64_t seed, const std::string& out) {
  const Config cfg = resolve(o);
  const RoadNetwork net = make_network(cfg);
  Scenario sc = cfg.scenario;
  sc.demand.horizon = cfg.train_horizon;
  TripSchedule sched;
  try {
    sched = generate_schedule(net, sc.demand, seed);
  } catch (const ConfigError& e) {
    throw CliError(2, "config", e.what());
  }
  const std::string dir = make_run_dir(out, "gen");
  write_file_atomic((fs::path(dir) / "config.ini").string(), render_config(cfg));
  write_file_atomic((fs::path(dir) / "network.json").string(), network_json(net).dump(1) + "\n");
  std::ostringstream csv;
  csv << "vehicle,spawn_s,entry,exit,parks,target,duration_s\n";
  for (const Trip& t : sched.trips)
    csv << t.id << ',' << fmt_num(t.spawn_time) << ',' << t.entry << ',' << t.exit << ','
        << (t.parks ? 1 : 0) << ',' << t.target << ',' << fmt_num(t.duration) << '\n';
  write_file_atomic((fs::path(dir) / "schedule.csv").string(), csv.str());
  write_manifest(dir, {{"command", "gen"},
                       {"config", o.config},
                       {"seeds", {seed}},
                       {"out", dir},
                       {"scenario", scenario_json(cfg)}});
  log_info("gen: " + std::to_string(net.lanes().size()) + " lanes, " +
           std::to_string(net.spaces().size()) + " spaces, " +
           std::to_string(sched.trips.size()) + " trips -> " + dir);
  std::cout << dir << '\n';
  return 0;
}

struct TrainOptions {
  int episodes = 1;
  std::uint64_t seed = 1;
  std::string checkpoint;
  bool resume = false;
  std::string ablation = "full";
  std::optional<double> lr;
  int select_every = 0;
  std::string val_seeds = "900-902";
  double max_extra_walk = 10.0;
};

int cmd_train(const Overrides& o, const TrainOptions& t, const std::string& out) {
  Config cfg = resolve(o);
  if (t.episodes < 1) throw CliError(2, "usage", "--episodes must be >= 1");
  if (t.select_every < 0) throw CliError(2, "usage", "--select-every must be >= 0");
  try {
    cfg.training.ablation = Ablation::parse(t.ablation);
  } catch (const ConfigError& e) {
    throw CliError(2, "usage", e.what());
  }
  cfg.training.seed = t.seed;
  if (t.lr) cfg.training.lr = *t.lr;
  try {
    cfg.training.validate();
  } catch (const ConfigError& e) {
    throw CliError(2, "usage", e.what());
  }
  const RoadNetwork net = make_network(cfg);
  Scenario sc = cfg.scenario;
  sc.demand.horizon = cfg.train_horizon;
  sc.control.policy = PolicySpec::parse("d_pa");

  DqnAgent agent(cfg.training);
  if (t.resume) {
    if (t.checkpoint.empty()) throw CliError(2, "usage", "--resume needs --checkpoint");
    try {
      agent.load(t.checkpoint);
    } catch (const CheckpointError& e) {
      throw CliError(1, "checkpoint", e.what());
    }
  }
  const std::string dir = make_run_dir(out, "train");
  const std::string ckpt =
      t.checkpoint.empty() ? (fs::path(dir) / "checkpoint.bin").string() : t.checkpoint;
  write_manifest(dir, {{"command", "train"},
                       {"config", o.config},
                       {"policy", "d_pa"},
                       {"ablation", cfg.training.ablation.name()},
                       {"seeds", {t.seed}},
                       {"episodes", t.episodes},
                       {"resume", t.resume},
                       {"out", dir},
                       {"checkpoint", ckpt},
                       {"select_every", t.select_every},
                       {"val_seeds", t.select_every > 0 ? json(parse_seeds(t.val_seeds)) : json::array()},
                       {"max_extra_walk", t.max_extra_walk},
                       {"scenario", scenario_json(cfg)}});

  std::optional<CheckpointSelector> selector;
  std::ostringstream vlog;
  if (t.select_every > 0) {
    selector.emplace(net, sc, parse_seeds(t.val_seeds), t.max_extra_walk, cfg.training.beta);
    vlog << "episode,mean_tloss_s,mean_walk_parkers_m,ref_tloss_s,ref_walk_parkers_m,kept\n";
  }

  const long horizon = static_cast<long>(std::ceil(cfg.train_horizon));
  const long per_episode = (horizon + sc.control.t_l - 1) / sc.control.t_l;
  const long first_episode = agent.epoch() / per_episode;
  std::ostringstream log;
  log << "episode,epoch,t,epsilon,loss,mean_reward,mean_time_loss,mean_walk,total_cleared,"
         "denied,released\n";
  for (int e = 0; e < t.episodes; ++e) {
    const long episode = first_episode + e;
    const auto r = run_episode(net, sc, t.seed * 1000003ULL + static_cast<std::uint64_t>(episode),
                               &agent, true, cfg.training.alpha, cfg.training.beta);
    long epoch = agent.epoch();
    for (const EpochRecord& rec : r.epochs) {
      log << episode << ',' << epoch++ << ',' << rec.t << ',' << fmt_num(rec.epsilon) << ','
          << (rec.loss ? fmt_num(*rec.loss) : std::string()) << ',' << fmt_num(rec.mean_reward)
          << ',' << fmt_num(rec.mean_time_loss) << ',' << fmt_num(rec.mean_walk) << ','
          << rec.total_cleared << ',' << rec.denied << ',' << rec.released << '\n';
    }
    agent.set_epoch(epoch);
    agent.save(ckpt);
    const auto summary = summarize(collect_records(*r.sim), cfg.training.alpha, cfg.training.beta);
    log_info("train: episode " + std::to_string(episode) + " mean time loss " +
             fmt_num(summary.mean_tloss) + " s, epsilon " + fmt_num(agent.epsilon()));
    if (selector && (e + 1) % t.select_every == 0) {
      const ValidationScore v = selector->consider(episode, agent);
      const bool kept = selector->best_episode() == episode;
      vlog << episode << ',' << fmt_num(v.tloss) << ',' << fmt_num(v.walk) << ','
           << fmt_num(v.ref_tloss) << ',' << fmt_num(v.ref_walk) << ',' << (kept ? 1 : 0) << '\n';
      log_info("train: validation " + fmt_num(v.tloss) + " s vs no_pa " + fmt_num(v.ref_tloss) +
               " s, extra walk " + fmt_num(v.extra_walk()) + " m" + (kept ? ", kept" : ""));
    }
  }
  if (selector) {
    write_file_atomic((fs::path(dir) / "validation.csv").string(), vlog.str());
    if (selector->has_best()) selector->save_best((fs::path(dir) / "best.bin").string());
  }
  write_file_atomic((fs::path(dir) / "train_log.csv").string(), log.str());
  if (ckpt != (fs::path(dir) / "checkpoint.bin").string()) {
    std::error_code ec;
    fs::copy_file(ckpt, fs::path(dir) / "checkpoint.bin", fs::copy_options::overwrite_existing, ec);
  }
  std::cout << dir << '\n';
  return 0;
}

struct EvalOptions {
  std::string policies;
  std::string seeds = "1";
  std::string checkpoint;
};

std::vector<PolicySpec> parse_policies(const std::string& text, bool have_checkpoint) {
  std::vector<PolicySpec> out;
  const auto names = text.empty() ? std::vector<std::string>{"no_pa", "s_pa(3)", "c_pa"}
                                  : split_list(text);
  try {
    for (const auto& n : names) out.push_back(PolicySpec::parse(n));
  } catch (const ConfigError& e) {
    throw CliError(2, "usage", e.what());
  }
  if (text.empty() && have_checkpoint) out.push_back(PolicySpec::parse("d_pa"));
  return out;
}

std::unique_ptr<DqnAgent> load_agent(const Config& cfg, const std::string& path) {
  try {
    TrainingConfig tc = cfg.training;
    tc.ablation = checkpoint_ablation(path);
    auto agent = std::make_unique<DqnAgent>(tc);
    agent->load(path);
    return agent;
  } catch (const CheckpointError& e) {
    throw CliError(1, "checkpoint", e.what());
  }
}

struct Evaluated {
  std::vector<VehicleRecord> records;
  MetricsSummary summary;
};

Evaluated evaluate(const RoadNetwork& net, Scenario sc, const PolicySpec& policy,
                   std::uint64_t seed, DqnAgent* agent, const Config& cfg,
                   std::optional<double> reference) {
  sc.control.policy = policy;
  log_debug("eval: " + policy.name() + " seed " + std::to_string(seed));
  const auto r = run_episode(net, sc, seed, agent, false, cfg.training.alpha, cfg.training.beta);
  Evaluated ev;
  ev.records = collect_records(*r.sim);
  try {
    ev.summary = summarize(ev.records, cfg.training.alpha, cfg.training.beta, reference);
  } catch (const EmptySummary& e) {
    throw CliError(1, "runtime", policy.name() + " seed " + std::to_string(seed) + ": " + e.what());
  }
  return ev;
}

/// Runs `policies` on every seed; no_pa is always run first as the reference.
void evaluate_all(const RoadNetwork& net, const Scenario& sc, const std::vector<PolicySpec>& policies,
                  const std::vector<std::uint64_t>& seeds, DqnAgent* agent, const Config& cfg,
                  const std::function<void(const PolicySpec&, std::uint64_t, const Evaluated&)>& sink) {
  for (std::uint64_t seed : seeds) {
    const Evaluated ref = evaluate(net, sc, PolicySpec::parse("no_pa"), seed, nullptr, cfg, std::nullopt);
    for (const PolicySpec& p : policies) {
      if (p.kind == PolicyKind::no_pa) {
        Evaluated same = ref;
        same.summary.tloss_pct = time_loss_pct(ref.summary.mean_tloss, ref.summary.mean_tloss);
        sink(p, seed, same);
      } else {
        sink(p, seed, evaluate(net, sc, p, seed, agent, cfg, ref.summary.mean_tloss));
      }
    }
  }
}

int cmd_eval(const Overrides& o, const EvalOptions& e, const std::string& out) {
  const Config cfg = resolve(o);
  const auto policies = parse_policies(e.policies, !e.checkpoint.empty());
  const auto seeds = parse_seeds(e.seeds);
  const bool need_agent = std::any_of(policies.begin(), policies.end(),
                                      [](const PolicySpec& p) { return p.kind == PolicyKind::d_pa; });
  if (need_agent && e.checkpoint.empty()) throw CliError(2, "usage", "d_pa needs --checkpoint");
  std::unique_ptr<DqnAgent> agent = need_agent ? load_agent(cfg, e.checkpoint) : nullptr;
  const RoadNetwork net = make_network(cfg);
  Scenario sc = cfg.scenario;
  sc.demand.horizon = cfg.eval_horizon;

  const std::string dir = make_run_dir(out, "eval");
  json pol = json::array();
  for (const auto& p : policies) pol.push_back(p.name());
  write_manifest(dir, {{"command", "eval"},
                       {"config", o.config},
                       {"policy", pol},
                       {"seeds", seeds},
                       {"out", dir},
                       {"checkpoint", e.checkpoint},
                       {"scenario", scenario_json(cfg)}});

  std::ostringstream summary;
  write_summary_header(summary);
  evaluate_all(net, sc, policies, seeds, agent.get(), cfg,
               [&](const PolicySpec& p, std::uint64_t seed, const Evaluated& ev) {
                 write_summary_row(summary, {p.name(), seed, ev.summary});
                 std::ostringstream veh;
                 write_vehicle_csv(veh, ev.records);
                 write_file_atomic((fs::path(dir) / ("vehicles_" + policy_tag(p.name()) + "_" +
                                                     std::to_string(seed) + ".csv"))
                                       .string(),
                                   veh.str());
                 log_info("eval: " + p.name() + " seed " + std::to_string(seed) +
                          " mean time loss " + fmt_num(ev.summary.mean_tloss) + " s");
               });
  write_file_atomic((fs::path(dir) / "summary.csv").string(), summary.str());
  std::cout << dir << '\n';
  return 0;
}

struct SweepOptions {
  std::string param;
  std::string values;
};

int cmd_sweep(const Overrides& o, const EvalOptions& e, const SweepOptions& s,
              const std::string& out) {
  static const std::vector<std::string> params = {"rate", "parking_probability", "duration", "grid"};
  if (std::find(params.begin(), params.end(), s.param) == params.end())
    throw CliError(2, "usage", "unknown sweep parameter '" + s.param +
                                   "' (rate, parking_probability, duration, grid)");
  const auto values = split_list(s.values);
  if (values.empty()) throw CliError(2, "usage", "--values is empty");
  const Config base = resolve(o);
  const auto policies = parse_policies(e.policies, !e.checkpoint.empty());
  const auto seeds = parse_seeds(e.seeds);
  const bool need_agent = std::any_of(policies.begin(), policies.end(),
                                      [](const PolicySpec& p) { return p.kind == PolicyKind::d_pa; });
  if (need_agent && e.checkpoint.empty()) throw CliError(2, "usage", "d_pa needs --checkpoint");
  std::unique_ptr<DqnAgent> agent = need_agent ? load_agent(base, e.checkpoint) : nullptr;

  std::vector<Config> configs;
  for (const std::string& v : values) {
    Config cfg = base;
    try {
      if (s.param == "grid") parse_grid(v, cfg.scenario.grid);
      else if (s.param == "rate") cfg.scenario.demand.rate_per_min = to_double(v);
      else if (s.param == "parking_probability") cfg.scenario.demand.parking_probability = to_double(v);
      else cfg.scenario.demand.mean_duration = to_double(v);
    } catch (const std::invalid_argument& ex) {
      throw CliError(2, "usage", "bad sweep value '" + v + "': " + ex.what());
    }
    validate(cfg, "sweep");
    configs.push_back(cfg);
  }

  const std::string dir = make_run_dir(out, "sweep");
  json pol = json::array();
  for (const auto& p : policies) pol.push_back(p.name());
  write_manifest(dir, {{"command", "sweep"},
                       {"config", o.config},
                       {"param", s.param},
                       {"values", values},
                       {"policy", pol},
                       {"seeds", seeds},
                       {"out", dir},
                       {"checkpoint", e.checkpoint},
                       {"scenario", scenario_json(base)}});

  std::ostringstream csv;
  csv << "param,value,";
  write_summary_header(csv);
  for (std::size_t k = 0; k < values.size(); ++k) {
    const RoadNetwork net = make_network(configs[k]);
    Scenario sc = configs[k].scenario;
    sc.demand.horizon = configs[k].eval_horizon;
    evaluate_all(net, sc, policies, seeds, agent.get(), configs[k],
                 [&](const PolicySpec& p, std::uint64_t seed, const Evaluated& ev) {
                   csv << s.param << ',' << values[k] << ',';
                   write_summary_row(csv, {p.name(), seed, ev.summary});
                   std::ostringstream veh;
                   write_vehicle_csv(veh, ev.records);
                   write_file_atomic((fs::path(dir) / ("vehicles_" + policy_tag(values[k]) + "_" +
                                                       policy_tag(p.name()) + "_" +
                                                       std::to_string(seed) + ".csv"))
                                         .string(),
                                     veh.str());
                   log_info("sweep: " + s.param + "=" + values[k] + " " + p.name() + " seed " +
                            std::to_string(seed) + " mean time loss " +
                            fmt_num(ev.summary.mean_tloss) + " s");
                 });
  }
  write_file_atomic((fs::path(dir) / "sweep.csv").string(), csv.str());
  std::cout << dir << '\n';
  return 0;
}

int cmd_plot(const std::vector<std::string>& inputs, const std::string& title,
             const std::string& out) {
  if (inputs.empty()) throw CliError(2, "usage", "plot needs at least one --input");
  std::vector<std::pair<std::string, std::string>> files;
  for (const std::string& in : inputs) {
    std::ifstream is(in);
    if (!is) throw CliError(1, "io", "cannot open " + in);
    const CsvTable table = read_csv(is, in);
    const std::string stem = fs::path(in).stem().string();
    files.emplace_back(stem, render_plot(table, title.empty() ? stem : title));
  }
  const std::string dir = make_run_dir(out, "plot");
  for (const auto& [stem, svg] : files) {
    write_file_atomic((fs::path(dir) / (stem + ".svg")).string(), svg);
  }
  for (const std::string& in : inputs) {
    std::error_code ec;
    fs::copy_file(in, fs::path(dir) / fs::path(in).filename(), fs::copy_options::overwrite_existing, ec);
    if (ec) throw CliError(1, "io", "cannot copy " + in + ": " + ec.message());
  }
  write_manifest(dir, {{"command", "plot"}, {"inputs", inputs}, {"out", dir}});
  std::cout << dir << '\n';
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"parkctl: traffic and curb-parking simulation with learned parking restrictions"};
  app.require_subcommand(1);
  std::string out = "runs";
  app.add_option("--out", out, "base directory for run outputs");

  Overrides o;
  std::uint64_t gen_seed = 1;
  auto* gen = app.add_subcommand("gen", "write a scenario (config, network, trip schedule)");
  add_scenario_options(gen, o);
  gen->add_option("--seed", gen_seed, "schedule seed");
  gen->add_option("--out", out);

  TrainOptions t;
  auto* train = app.add_subcommand("train", "train the lane agents");
  add_scenario_options(train, o);
  train->add_option("--episodes", t.episodes, "training episodes");
  train->add_option("--seed", t.seed, "training seed");
  train->add_option("--checkpoint", t.checkpoint, "checkpoint path (written after every episode)");
  train->add_flag("--resume", t.resume, "continue from --checkpoint");
  train->add_option("--ablation", t.ablation, "dqn, dqn_lstm or full");
  train->add_option("--lr", t.lr, "learning rate");
  train->add_option("--select-every", t.select_every,
                    "validate every N episodes and keep the best agent as best.bin (0: off)");
  train->add_option("--val-seeds", t.val_seeds, "validation seed list");
  train->add_option("--max-extra-walk", t.max_extra_walk,
                    "metres of parkers' walk over no_pa a kept agent may add");
  train->add_option("--out", out);

  EvalOptions e;
  auto* eval = app.add_subcommand("eval", "evaluate policies on a list of seeds");
  add_scenario_options(eval, o);
  eval->add_option("--policy", e.policies, "comma list of no_pa, s_pa(k), c_pa, d_pa");
  auto* seeds_opt = eval->add_option("--seeds", e.seeds, "seed list, e.g. 1-5 or 1,4,9");
  eval->add_option("--seed", e.seeds, "single seed")->excludes(seeds_opt);
  eval->add_option("--checkpoint", e.checkpoint, "trained agent for d_pa");
  eval->add_option("--out", out);

  SweepOptions s;
  EvalOptions se;
  auto* sweep = app.add_subcommand("sweep", "evaluate policies over values of one parameter");
  add_scenario_options(sweep, o);
  sweep->add_option("--param", s.param, "rate, parking_probability, duration or grid")->required();
  sweep->add_option("--values", s.values, "comma list of values")->required();
  sweep->add_option("--policy", se.policies, "comma list of policies");
  sweep->add_option("--seeds,--seed", se.seeds, "seed list");
  sweep->add_option("--checkpoint", se.checkpoint, "trained agent for d_pa");
  sweep->add_option("--out", out);

  std::vector<std::string> inputs;
  std::string title;
  auto* plot = app.add_subcommand("plot", "render summary or sweep CSVs as SVG line charts");
  plot->add_option("--input,input", inputs, "CSV files")->required();
  plot->add_option("--title", title, "chart title");
  plot->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "parkctl: error: usage: " << ex.what() << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_gen(o, gen_seed, out);
    if (*train) return cmd_train(o, t, out);
    if (*eval) return cmd_eval(o, e, out);
    if (*sweep) return cmd_sweep(o, se, s, out);
    if (*plot) return cmd_plot(inputs, title, out);
  } catch (const CliError& ex) {
    std::cerr << "parkctl: error: " << ex.kind() << ": " << ex.what() << '\n';
    return ex.code();
  } catch (const ConfigError& ex) {
    std::cerr << "parkctl: error: config: " << ex.what() << '\n';
    return 2;
  } catch (const CheckpointError& ex) {
    std::cerr << "parkctl: error: checkpoint: " << ex.what() << '\n';
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "parkctl: error: runtime: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace parkctl
