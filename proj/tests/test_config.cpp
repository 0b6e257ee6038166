#include <catch2/catch_amalgamated.hpp>

#include <string>

#include "charform/config.hpp"

using namespace charform;

namespace {

const char* kSolveConfig = R"(
# quadratic focusing run
problem {
  hamiltonian = "p2^2/2"
  dimension = 2
}
initial {
  surface {
    x1 = "0"
    x2 = "r1"
  }
  u0 = "-r1^2"   # focusing data
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
output {
  directory = "run_out"
  formats = "csv json"
}
)";

}  // namespace

TEST_CASE("nested block parsing") {
  ConfigBlock root = parse_config_text(kSolveConfig);
  const ConfigBlock* problem = root.child("problem");
  REQUIRE(problem != nullptr);
  CHECK(*problem->find("hamiltonian") == "p2^2/2");
  CHECK(*problem->find("dimension") == "2");
  const ConfigBlock* surf = root.child("initial")->child("surface");
  REQUIRE(surf != nullptr);
  CHECK(*surf->find("x2") == "r1");
  // comments are stripped, including trailing ones after quoted values
  CHECK(*root.child("initial")->find("u0") == "-r1^2");
  CHECK(root.child("nope") == nullptr);
  CHECK(problem->find("nope") == nullptr);
  CHECK_THROWS_AS(problem->require("nope", "problem"), ConfigError);
}

TEST_CASE("parse errors carry line numbers") {
  CHECK_THROWS_WITH(parse_config_text("}\n"),
                    Catch::Matchers::ContainsSubstring("line 1"));
  CHECK_THROWS_WITH(parse_config_text("a {\nkey value\n}\n"),
                    Catch::Matchers::ContainsSubstring("line 2"));
  CHECK_THROWS_AS(parse_config_text("a {\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("{\n}\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("= 3\n"), ConfigError);
}

TEST_CASE("run configuration loading and validation") {
  RunConfig cfg = load_run_config(parse_config_text(kSolveConfig));
  REQUIRE(cfg.hamiltonian.has_value());
  CHECK(*cfg.hamiltonian == "p2^2/2");
  CHECK(!cfg.equation.has_value());
  CHECK(cfg.dimension == 2);
  CHECK(cfg.u0 == "-r1^2");
  REQUIRE(cfg.ranges.size() == 1);
  CHECK(std::get<0>(cfg.ranges[0]) == "r1");
  CHECK(std::get<1>(cfg.ranges[0]) == -1.0);
  CHECK(std::get<2>(cfg.ranges[0]) == 1.0);
  CHECK(cfg.h == 0.01);
  CHECK(cfg.s_max == 1.0);
  CHECK(cfg.rays == 9);
  REQUIRE(cfg.grid.size() == 2);
  CHECK(cfg.grid[1].count == 11);
  CHECK(cfg.threshold == 0.01);
  CHECK(cfg.directory == "run_out");
}

TEST_CASE("configuration rejections") {
  auto loads = [](const std::string& text) {
    return load_run_config(parse_config_text(text));
  };
  // both equation and hamiltonian
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1\"\n hamiltonian = \"p2\"\n"
            " dimension = 2\n}\n"),
      ConfigError);
  // neither, and no direct field
  CHECK_THROWS_AS(loads("problem {\n dimension = 2\n}\n"), ConfigError);
  // bad step size
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1^2-1\"\n dimension = 1\n}\n"
            "solver {\n h = 0\n s_max = 1\n}\n"),
      ConfigError);
  // missing s_max
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1^2-1\"\n dimension = 1\n}\n"
            "solver {\n h = 0.01\n}\n"),
      ConfigError);
  // grid axes need at least 3 points
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1^2-1\"\n dimension = 1\n}\n"
            "diagnose {\n grid {\n x1 = 0 1 2\n }\n}\n"),
      ConfigError);
  // malformed numbers
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1\"\n dimension = two\n}\n"),
      ConfigError);
  // ranges need exactly two values
  CHECK_THROWS_AS(
      loads("problem {\n equation = \"p1\"\n dimension = 2\n}\n"
            "initial {\n u0 = \"0\"\n range {\n r1 = 1\n }\n}\n"),
      ConfigError);
}

TEST_CASE("field-only configurations need no equation") {
  RunConfig cfg = load_run_config(parse_config_text(
      "diagnose {\n"
      "  grid {\n    x1 = 0 1 5\n    x2 = 0 1 5\n  }\n"
      "  field {\n    p1 = \"x2\"\n    p2 = \"0\"\n"
      "    p3_file = \"p3.csv\"\n  }\n"
      "}\n"));
  REQUIRE(cfg.field.has_value());
  REQUIRE(cfg.field->expressions.size() == 2);
  CHECK(cfg.field->expressions[0].first == "p1");
  CHECK(cfg.field->expressions[0].second == "x2");
  REQUIRE(cfg.field->files.size() == 1);
  CHECK(cfg.field->files[0].first == "p3");
  CHECK(cfg.field->files[0].second == "p3.csv");
}

TEST_CASE("dumped configuration reloads to the same run") {
  RunConfig cfg = load_run_config(parse_config_text(kSolveConfig));
  std::string dumped = dump_run_config(cfg);
  RunConfig back = load_run_config(parse_config_text(dumped));
  CHECK(back.hamiltonian == cfg.hamiltonian);
  CHECK(back.equation == cfg.equation);
  CHECK(back.dimension == cfg.dimension);
  CHECK(back.surface == cfg.surface);
  CHECK(back.u0 == cfg.u0);
  CHECK(back.ranges == cfg.ranges);
  CHECK(back.h == cfg.h);
  CHECK(back.s_max == cfg.s_max);
  CHECK(back.rays == cfg.rays);
  CHECK(back.threshold == cfg.threshold);
  CHECK(back.directory == cfg.directory);
  CHECK(back.formats == cfg.formats);
  REQUIRE(back.grid.size() == cfg.grid.size());
  for (std::size_t i = 0; i < cfg.grid.size(); ++i) {
    CHECK(back.grid[i].name == cfg.grid[i].name);
    CHECK(back.grid[i].lo == cfg.grid[i].lo);
    CHECK(back.grid[i].hi == cfg.grid[i].hi);
    CHECK(back.grid[i].count == cfg.grid[i].count);
  }
  // dumping the reload is a fixed point
  CHECK(dump_run_config(back) == dumped);
}
