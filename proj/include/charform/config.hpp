#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace charform {

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Nested key-value block text format:
//
//   problem {
//     hamiltonian = "p2^2/2"
//     dimension = 2
//   }
//
// Values are either one quoted string or whitespace-separated scalars.
// '#' starts a comment.
// ---------------------------------------------------------------------------

struct ConfigBlock {
  std::vector<std::pair<std::string, std::string>> values;
  std::vector<std::pair<std::string, ConfigBlock>> children;

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : values)
      if (k == key) return &v;
    return nullptr;
  }
  const ConfigBlock* child(const std::string& key) const {
    for (const auto& [k, v] : children)
      if (k == key) return &v;
    return nullptr;
  }
  std::string require(const std::string& key, const std::string& where) const {
    const std::string* v = find(key);
    if (!v) throw ConfigError("missing key '" + key + "' in block '" + where + "'");
    return *v;
  }
};

namespace detail {

inline std::string strip_line(std::string line) {
  auto hash = line.find('#');
  bool in_quote = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_quote = !in_quote;
    if (line[i] == '#' && !in_quote) {
      hash = i;
      line.erase(hash);
      break;
    }
  }
  auto b = line.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = line.find_last_not_of(" \t\r");
  return line.substr(b, e - b + 1);
}

inline double parse_number(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
  }
  while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
    ++pos;
  if (pos != s.size())
    throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
  return v;
}

}  // namespace detail

inline ConfigBlock parse_config_text(const std::string& text) {
  ConfigBlock root;
  std::vector<ConfigBlock*> stack{&root};
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = detail::strip_line(raw);
    if (line.empty()) continue;
    if (line == "}") {
      if (stack.size() == 1)
        throw ConfigError("line " + std::to_string(lineno) + ": unmatched '}'");
      stack.pop_back();
      continue;
    }
    if (line.size() > 1 && line.back() == '{') {
      std::string name = detail::strip_line(line.substr(0, line.size() - 1));
      if (name.empty())
        throw ConfigError("line " + std::to_string(lineno) + ": block needs a name");
      stack.back()->children.emplace_back(name, ConfigBlock{});
      stack.push_back(&stack.back()->children.back().second);
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value' or a block");
    std::string key = detail::strip_line(line.substr(0, eq));
    std::string value = detail::strip_line(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    stack.back()->values.emplace_back(key, value);
  }
  if (stack.size() != 1) throw ConfigError("unterminated block");
  return root;
}

inline ConfigBlock parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// RunConfig: the validated shape of a run.
// ---------------------------------------------------------------------------

struct GridAxisSpec {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;
  int count = 2;
};

struct FieldSpec {
  // direct p-field input for closure runs: expressions in x1..xn or grid files
  std::vector<std::pair<std::string, std::string>> expressions;  // p_i -> text
  std::vector<std::pair<std::string, std::string>> files;        // p_i -> path
};

struct RunConfig {
  std::optional<std::string> equation;
  std::optional<std::string> hamiltonian;
  int dimension = 0;

  std::vector<std::pair<std::string, std::string>> surface;  // x_i -> expr
  std::string u0;
  std::vector<std::pair<std::string, std::string>> momenta;  // p_i -> expr
  std::vector<std::tuple<std::string, double, double>> ranges;  // r_a lo hi
  std::optional<int> branch;
  double bracket_lo = -10.0;
  double bracket_hi = 10.0;

  double h = 0.0;
  double s_max = 0.0;
  int rays = 0;

  std::vector<GridAxisSpec> grid;
  double threshold = 1e-2;
  std::optional<FieldSpec> field;

  std::string directory = "out";
  std::string formats = "csv json";
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace detail

inline RunConfig load_run_config(const ConfigBlock& root) {
  RunConfig cfg;

  const ConfigBlock* problem = root.child("problem");
  if (problem) {
    if (const std::string* v = problem->find("equation")) cfg.equation = *v;
    if (const std::string* v = problem->find("hamiltonian"))
      cfg.hamiltonian = *v;
    cfg.dimension = static_cast<int>(
        detail::parse_number(problem->require("dimension", "problem"),
                             "dimension"));
  }
  bool field_only = false;
  if (const ConfigBlock* diag = root.child("diagnose"))
    if (diag->child("field")) field_only = true;

  if (cfg.equation && cfg.hamiltonian)
    throw ConfigError(
        "exactly one of 'equation' and 'hamiltonian' may be given");
  if (!cfg.equation && !cfg.hamiltonian && !field_only)
    throw ConfigError("one of 'equation' and 'hamiltonian' is required");
  if (problem && cfg.dimension < 1)
    throw ConfigError("dimension must be >= 1");

  if (const ConfigBlock* init = root.child("initial")) {
    if (const ConfigBlock* surf = init->child("surface"))
      cfg.surface = surf->values;
    cfg.u0 = init->require("u0", "initial");
    if (const ConfigBlock* mom = init->child("momenta"))
      cfg.momenta = mom->values;
    if (const ConfigBlock* range = init->child("range")) {
      for (const auto& [name, v] : range->values) {
        auto toks = detail::split_ws(v);
        if (toks.size() != 2)
          throw ConfigError("range '" + name + "' needs 'min max'");
        cfg.ranges.emplace_back(name, detail::parse_number(toks[0], name),
                                detail::parse_number(toks[1], name));
      }
    }
    if (const std::string* v = init->find("branch"))
      cfg.branch = static_cast<int>(detail::parse_number(*v, "branch"));
    if (const std::string* v = init->find("bracket")) {
      auto toks = detail::split_ws(*v);
      if (toks.size() != 2) throw ConfigError("bracket needs 'lo hi'");
      cfg.bracket_lo = detail::parse_number(toks[0], "bracket");
      cfg.bracket_hi = detail::parse_number(toks[1], "bracket");
    }
  }

  if (const ConfigBlock* solver = root.child("solver")) {
    cfg.h = detail::parse_number(solver->require("h", "solver"), "h");
    cfg.s_max =
        detail::parse_number(solver->require("s_max", "solver"), "s_max");
    if (const std::string* v = solver->find("rays"))
      cfg.rays = static_cast<int>(detail::parse_number(*v, "rays"));
    if (!(cfg.h > 0.0)) throw ConfigError("h must be > 0");
    if (!(cfg.s_max > 0.0)) throw ConfigError("s_max must be > 0");
  }

  if (const ConfigBlock* diag = root.child("diagnose")) {
    if (const ConfigBlock* grid = diag->child("grid")) {
      for (const auto& [name, v] : grid->values) {
        auto toks = detail::split_ws(v);
        if (toks.size() != 3)
          throw ConfigError("grid '" + name + "' needs 'min max count'");
        GridAxisSpec gs;
        gs.name = name;
        gs.lo = detail::parse_number(toks[0], name);
        gs.hi = detail::parse_number(toks[1], name);
        gs.count = static_cast<int>(detail::parse_number(toks[2], name));
        if (gs.count < 3)
          throw ConfigError("grid '" + name + "' needs at least 3 points");
        cfg.grid.push_back(gs);
      }
    }
    if (const std::string* v = diag->find("threshold"))
      cfg.threshold = detail::parse_number(*v, "threshold");
    if (const ConfigBlock* field = diag->child("field")) {
      FieldSpec fs;
      for (const auto& [key, v] : field->values) {
        if (key.size() > 5 && key.substr(key.size() - 5) == "_file")
          fs.files.emplace_back(key.substr(0, key.size() - 5), v);
        else
          fs.expressions.emplace_back(key, v);
      }
      cfg.field = std::move(fs);
    }
  }

  if (const ConfigBlock* output = root.child("output")) {
    if (const std::string* v = output->find("directory")) cfg.directory = *v;
    if (const std::string* v = output->find("formats")) cfg.formats = *v;
  }
  return cfg;
}

inline RunConfig load_run_config_file(const std::string& path) {
  return load_run_config(parse_config_file(path));
}

// Normalized re-emission; parsing the dump yields an equivalent RunConfig.
inline std::string dump_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "problem {\n";
  if (cfg.equation) out << "  equation = \"" << *cfg.equation << "\"\n";
  if (cfg.hamiltonian)
    out << "  hamiltonian = \"" << *cfg.hamiltonian << "\"\n";
  out << "  dimension = " << cfg.dimension << "\n";
  out << "}\n";
  out << "initial {\n";
  if (!cfg.surface.empty()) {
    out << "  surface {\n";
    for (const auto& [k, v] : cfg.surface)
      out << "    " << k << " = \"" << v << "\"\n";
    out << "  }\n";
  }
  out << "  u0 = \"" << cfg.u0 << "\"\n";
  if (!cfg.momenta.empty()) {
    out << "  momenta {\n";
    for (const auto& [k, v] : cfg.momenta)
      out << "    " << k << " = \"" << v << "\"\n";
    out << "  }\n";
  }
  if (!cfg.ranges.empty()) {
    out << "  range {\n";
    for (const auto& [k, lo, hi] : cfg.ranges)
      out << "    " << k << " = " << num(lo) << " " << num(hi) << "\n";
    out << "  }\n";
  }
  if (cfg.branch) out << "  branch = " << *cfg.branch << "\n";
  out << "  bracket = " << num(cfg.bracket_lo) << " " << num(cfg.bracket_hi)
      << "\n";
  out << "}\n";
  out << "solver {\n";
  out << "  h = " << num(cfg.h) << "\n";
  out << "  s_max = " << num(cfg.s_max) << "\n";
  if (cfg.rays > 0) out << "  rays = " << cfg.rays << "\n";
  out << "}\n";
  out << "diagnose {\n";
  if (!cfg.grid.empty()) {
    out << "  grid {\n";
    for (const auto& g : cfg.grid)
      out << "    " << g.name << " = " << num(g.lo) << " " << num(g.hi) << " "
          << g.count << "\n";
    out << "  }\n";
  }
  out << "  threshold = " << num(cfg.threshold) << "\n";
  if (cfg.field) {
    out << "  field {\n";
    for (const auto& [k, v] : cfg.field->expressions)
      out << "    " << k << " = \"" << v << "\"\n";
    for (const auto& [k, v] : cfg.field->files)
      out << "    " << k << "_file = \"" << v << "\"\n";
    out << "  }\n";
  }
  out << "}\n";
  out << "output {\n";
  out << "  directory = \"" << cfg.directory << "\"\n";
  out << "  formats = \"" << cfg.formats << "\"\n";
  out << "}\n";
  return out.str();
}

}  // namespace charform
