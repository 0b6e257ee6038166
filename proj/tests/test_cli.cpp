#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("CHARFORM_CLI");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunResult run_cli(const std::string& args, const fs::path& dir) {
  fs::path out = dir / "stdout.txt";
  fs::path err = dir / "stderr.txt";
  std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2> " +
                    err.string();
  int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("charform_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

const char* kFocusConfig = R"(problem {
  hamiltonian = "p2^2/2"
  dimension = 2
}
initial {
  surface {
    x1 = "0"
    x2 = "r1"
  }
  u0 = "-r1^2"
  range {
    r1 = -1 1
  }
}
solver {
  h = 0.01
  s_max = 1.0
  rays = 9
}
diagnose {
  grid {
    x1 = 0.05 0.45 9
    x2 = -0.5 0.5 11
  }
  threshold = 0.01
}
)";

}  // namespace

TEST_CASE("solve writes the fan and a summary") {
  fs::path dir = fresh_dir("solve");
  write(dir / "run.cfg", kFocusConfig);
  fs::path out = dir / "out";
  RunResult r = run_cli("solve --config " + (dir / "run.cfg").string() +
                            " --out " + out.string(),
                        dir);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out / "fan.csv"));
  REQUIRE(fs::exists(out / "summary.json"));

  std::ifstream fan(out / "fan.csv");
  std::string header;
  std::getline(fan, header);
  CHECK(header == "ray,s,x1,x2,u,p1,p2,jacobian,F_residual");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(fan, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 9 * 101);  // 9 rays, 100 steps + initial checkpoint

  nlohmann::json summary = nlohmann::json::parse(slurp(out / "summary.json"));
  REQUIRE(summary.contains("caustics"));
  CHECK(!summary["caustics"].empty());
  CHECK(summary["branch_count"] == 1);
  // the quadratic data focuses at s = 0.5
  for (const auto& c : summary["caustics"])
    CHECK(std::abs(double(c["s_star"]) - 0.5) < 0.01);
}

TEST_CASE("closure classifies a smooth transported field as a Function") {
  fs::path dir = fresh_dir("closure");
  write(dir / "run.cfg",
        "problem {\n  hamiltonian = \"2*p2\"\n  dimension = 2\n}\n"
        "initial {\n  surface {\n    x1 = \"0\"\n    x2 = \"r1\"\n  }\n"
        "  u0 = \"sin(r1)\"\n  range {\n    r1 = -3 1\n  }\n}\n"
        "solver {\n  h = 0.01\n  s_max = 1.0\n  rays = 161\n}\n"
        "diagnose {\n  grid {\n    x1 = 0.1 0.9 21\n    x2 = -1 1 21\n  }\n"
        "  threshold = 0.01\n}\n");
  fs::path out = dir / "out";
  RunResult r = run_cli("closure --config " + (dir / "run.cfg").string() +
                            " --out " + out.string(),
                        dir);
  REQUIRE(r.exit_code == 0);
  nlohmann::json rep = nlohmann::json::parse(slurp(out / "closure.json"));
  CHECK(rep["classification"] == "Function");
  CHECK(double(rep["max_abs_interior"]) < double(rep["threshold"]));
  CHECK(rep["multivalued_cells"] == 0);
}

TEST_CASE("closure accepts a direct p-field without solving") {
  fs::path dir = fresh_dir("field");
  write(dir / "run.cfg",
        "diagnose {\n"
        "  grid {\n    x1 = 0 1 11\n    x2 = 0 1 11\n  }\n"
        "  field {\n    p1 = \"x2\"\n    p2 = \"0\"\n  }\n"
        "  threshold = 0.01\n"
        "}\n");
  fs::path out = dir / "out";
  RunResult r = run_cli("closure --config " + (dir / "run.cfg").string() +
                            " --out " + out.string(),
                        dir);
  REQUIRE(r.exit_code == 0);
  nlohmann::json rep = nlohmann::json::parse(slurp(out / "closure.json"));
  CHECK(rep["classification"] == "Functional");
  CHECK(double(rep["max_abs_interior"]) > 0.9);
}

TEST_CASE("caustics subcommand writes records and the jacobian trace") {
  fs::path dir = fresh_dir("caustics");
  write(dir / "run.cfg", kFocusConfig);
  fs::path out = dir / "out";
  RunResult r = run_cli("caustics --config " + (dir / "run.cfg").string() +
                            " --out " + out.string(),
                        dir);
  REQUIRE(r.exit_code == 0);
  nlohmann::json j = nlohmann::json::parse(slurp(out / "caustics.json"));
  CHECK(!j["caustics"].empty());
  std::ifstream jac(out / "jacobian.csv");
  std::string header;
  std::getline(jac, header);
  CHECK(header == "branch,ray,s,jacobian");
}

TEST_CASE("config errors exit with code 2") {
  fs::path dir = fresh_dir("cfgerr");
  write(dir / "bad.cfg", "problem {\n  dimension = 2\n}\n");
  RunResult r = run_cli("solve --config " + (dir / "bad.cfg").string(), dir);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("config error") != std::string::npos);

  RunResult missing =
      run_cli("solve --config " + (dir / "nope.cfg").string(), dir);
  CHECK(missing.exit_code == 2);
}

TEST_CASE("solver failures exit with code 3") {
  fs::path dir = fresh_dir("solverr");
  // du0/dr = 2 is incompatible with |grad u| = 1
  write(dir / "run.cfg",
        "problem {\n  equation = \"p1^2 + p2^2 - 1\"\n  dimension = 2\n}\n"
        "initial {\n  surface {\n    x1 = \"0\"\n    x2 = \"r1\"\n  }\n"
        "  u0 = \"2*r1\"\n  range {\n    r1 = -1 1\n  }\n}\n"
        "solver {\n  h = 0.01\n  s_max = 1.0\n  rays = 5\n}\n");
  RunResult r = run_cli("solve --config " + (dir / "run.cfg").string(), dir);
  CHECK(r.exit_code == 3);
  CHECK(r.err.find("solver error") != std::string::npos);
}

TEST_CASE("dump-config emits a normalized reloadable configuration") {
  fs::path dir = fresh_dir("dump");
  write(dir / "run.cfg", kFocusConfig);
  RunResult first = run_cli("solve --config " + (dir / "run.cfg").string() +
                                " --dump-config",
                            dir);
  REQUIRE(first.exit_code == 0);
  CHECK(first.out.find("hamiltonian = \"p2^2/2\"") != std::string::npos);

  write(dir / "dumped.cfg", first.out);
  RunResult second = run_cli("solve --config " + (dir / "dumped.cfg").string() +
                                 " --dump-config",
                             dir);
  REQUIRE(second.exit_code == 0);
  CHECK(second.out == first.out);
}

TEST_CASE("thread count does not change the written fan") {
  fs::path dir = fresh_dir("threads");
  write(dir / "run.cfg", kFocusConfig);
  fs::path out1 = dir / "out1";
  fs::path out4 = dir / "out4";
  REQUIRE(run_cli("solve --config " + (dir / "run.cfg").string() + " --out " +
                      out1.string() + " --threads 1",
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("solve --config " + (dir / "run.cfg").string() + " --out " +
                      out4.string() + " --threads 4",
                  dir)
              .exit_code == 0);
  CHECK(slurp(out1 / "fan.csv") == slurp(out4 / "fan.csv"));
  CHECK(slurp(out1 / "summary.json") == slurp(out4 / "summary.json"));
}
