#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "nvspin/cli.hpp"

using namespace nvspin;
namespace fs = std::filesystem;

namespace {

std::string config_path(const std::string &name) {
  return std::string(NVSPIN_CONFIG_DIR) + "/" + name + ".json";
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nvspin");
  std::vector<const char *> argv;
  for (const auto &a : args)
    argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir() {
  const auto dir = fs::temp_directory_path() / ("nvspin_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

} // namespace

TEST(Csv, SpectrumRoundTripIsBitIdentical) {
  Spectrum s;
  s.x = {2.5e-17, 0.1, 1.0 / 3.0, 1e300};
  s.y = {-0.0, 2.2250738585072014e-308, 1.7976931348623157e308, std::nextafter(1.0, 2.0)};
  s.y_err = std::vector<double>{1, 2, 3, 4};
  s.extra = {{"flagged", {0, 1, 0, 1}}};
  s.x_unit = "freq_MHz";
  s.y_unit = "polarization";
  s.meta["species"] = "N14";
  std::ostringstream a;
  write_spectrum_csv(a, s, {"fnv1a64:abc", false});
  std::istringstream in(a.str());
  const Spectrum back = read_spectrum_csv(in);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(std::memcmp(&back.x[i], &s.x[i], sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&back.y[i], &s.y[i], sizeof(double)), 0);
  }
  ASSERT_TRUE(back.y_err.has_value());
  EXPECT_EQ(back.extra.at(0).first, "flagged");
  EXPECT_EQ(back.meta.at("species"), "N14");
  std::ostringstream b;
  write_spectrum_csv(b, back, {"fnv1a64:abc", false});
  EXPECT_EQ(a.str(), b.str());
}

TEST(Csv, QuotedCellsRoundTrip) {
  EXPECT_EQ(csv_cell("plain"), "plain");
  EXPECT_EQ(csv_cell("(0,+1)"), "\"(0,+1)\"");
  EXPECT_EQ(csv_cell("say \"hi\""), "\"say \"\"hi\"\"\"");
  const auto f = split_csv_line("\"(0,+1)\",2.5,\"a \"\"b\"\"\"");
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0], "(0,+1)");
  EXPECT_EQ(f[2], "a \"b\"");
}

TEST(Csv, MalformedInputIsAConfigError) {
  std::istringstream ragged("x,y\n1,2\n3\n");
  EXPECT_THROW(read_spectrum_csv(ragged), ConfigError);
  std::istringstream bad("x,y\n1,abc\n");
  EXPECT_THROW(read_spectrum_csv(bad), ConfigError);
  std::istringstream empty("# only comments\n");
  EXPECT_THROW(read_spectrum_csv(empty), ConfigError);
}

TEST(Csv, TimestampOnlyWhenRequested) {
  Spectrum s;
  s.x = {1};
  s.y = {2};
  std::ostringstream with, without;
  write_spectrum_csv(with, s, {"", true});
  write_spectrum_csv(without, s, {"", false});
  EXPECT_NE(with.str().find("# generated: "), std::string::npos);
  EXPECT_EQ(without.str().find("generated"), std::string::npos);
}

TEST(Config, NormalizedDumpRoundTrips) {
  for (const auto &entry : fs::directory_iterator(NVSPIN_CONFIG_DIR)) {
    const auto a = load_config(entry.path().string());
    const auto b = load_config_text(normalized_dump(a), "<dump>");
    EXPECT_EQ(normalized_dump(a), normalized_dump(b)) << entry.path();
    EXPECT_EQ(config_hash(a), config_hash(b));
  }
}

TEST(Config, UnknownKeysAreRejectedWithSuggestions) {
  try {
    load_config_text("{\n \"field\": {\"B0\": [0, 0, 509]},\n \"sytem\": {}\n}", "t.json");
    FAIL() << "expected a ConfigError";
  } catch (const ConfigError &e) {
    ASSERT_EQ(e.problems().size(), 2u);
    const std::string all = e.what();
    EXPECT_NE(all.find("B0_gauss"), std::string::npos);
    EXPECT_NE(all.find("did you mean \"system\""), std::string::npos);
    EXPECT_NE(all.find("t.json:2"), std::string::npos);
  }
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(load_config_text("{\"scan\": {\"points\": \"x\"}}", "t"), ConfigError);
  EXPECT_THROW(load_config_text("{\"system\": {\"species\": \"Xe129\"}}", "t"), ConfigError);
  EXPECT_THROW(load_config_text("{\"field\": {\"B0_gauss\": [0, 0]}}", "t"), ConfigError);
  EXPECT_THROW(load_config_text("{not json", "t"), ConfigError);
}

TEST(Config, OverridesApplyBeforeValidation) {
  const auto c = load_config_text("{}", "t", {"field.B0_gauss=[0,0,65]", "system.species=\"C13\"",
                                              "description=plain text"});
  EXPECT_EQ(c.field.B0.z(), 65.0);
  EXPECT_EQ(c.system.species.id, Species::C13);
  EXPECT_EQ(c.description, "plain text");
  EXPECT_THROW(load_config_text("{}", "t", {"novalue"}), ConfigError);
  EXPECT_THROW(load_config_text("{}", "t", {"field.bogus=1"}), ConfigError);
}

TEST(FitJson, KeysAreSortedAndComplete) {
  FitResult f;
  f.model = "lorentzian";
  f.names = {"width", "baseline"};
  f.values = {0.1, 1.0};
  f.converged = true;
  const auto j = fit_to_json(f, "h1", "h2");
  std::ostringstream os;
  write_fit_json(os, j);
  const std::string s = os.str();
  EXPECT_LT(s.find("\"baseline\""), s.find("\"width\""));
  EXPECT_TRUE(j["std_errors"].is_null());
  EXPECT_EQ(j["input_hash"], "h1");
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({"--version"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"bogus"}).code, 2);
  EXPECT_EQ(run_cli({"levels", "-c", "/nonexistent.json"}).code, 2);
  const auto bad = run_cli({"levels", "-c", config_path("levels_n14_509G"), "-s", "field.B0=1"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("B0_gauss"), std::string::npos);
  // a non-axial field for an axial-only command is a config error
  EXPECT_EQ(run_cli({"pump", "-c", config_path("pump_n14_509G"), "-s", "field.B0_gauss=[5,0,500]",
                     "--no-timestamp"})
                .code,
            2);
  EXPECT_EQ(run_cli({"selftest"}).code, 0);
}

TEST(Cli, FitThatCannotConvergeReturnsOne) {
  const auto dir = scratch_dir();
  const auto csv = dir / "flat.csv";
  {
    std::ofstream f(csv);
    f << "x,y\n";
    for (int i = 0; i < 5; ++i)
      f << i << ",1\n";
  }
  // five points cannot carry three Lorentzians: the fit stage throws
  const auto r = run_cli({"fit", "-c", config_path("fit_fig1d_lorentzian"), "-s",
                          "fit.input_csv=\"" + csv.string() + "\"", "--no-timestamp"});
  EXPECT_EQ(r.code, 1);
  fs::remove_all(dir);
}

TEST(Cli, OutputsAreDeterministic) {
  for (const char *name : {"levels_n14_509G", "eslac_n14", "pump_n14_509G", "fig1d_n14_509G"}) {
    const std::string cmd = std::string(name).rfind("fig1", 0) == 0 ? "esr"
                            : std::string(name).rfind("levels", 0) == 0 ? "levels"
                            : std::string(name).rfind("eslac", 0) == 0  ? "eslac"
                                                                        : "pump";
    const auto a = run_cli({cmd, "-c", config_path(name), "--no-timestamp", "-o", "-"});
    const auto b = run_cli({cmd, "-c", config_path(name), "--no-timestamp", "-o", "-"});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out) << name;
    EXPECT_EQ(a.out.find("generated"), std::string::npos);
  }
}

TEST(Cli, DumpConfigIsNormalized) {
  const auto r = run_cli({"levels", "-c", config_path("levels_n14_509G"), "--dump-config"});
  ASSERT_EQ(r.code, 0);
  const auto c = load_config_text(r.out, "<dumped>");
  EXPECT_EQ(normalized_dump(c), r.out);
}

TEST(Cli, BinaryWritesOutputFile) {
  const auto dir = scratch_dir();
  const auto out = dir / "levels.csv";
  const std::string cmd = std::string("\"") + NVSPIN_CLI + "\" levels -c \"" +
                          config_path("levels_n14_509G") + "\" --no-timestamp -o \"" + out.string() + "\"";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  std::ifstream f(out);
  std::stringstream ss;
  ss << f.rdbuf();
  const auto inproc = run_cli({"levels", "-c", config_path("levels_n14_509G"), "--no-timestamp"});
  EXPECT_EQ(ss.str(), inproc.out);
  fs::remove_all(dir);
}
