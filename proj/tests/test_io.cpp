#include <gtest/gtest.h>

#include <sstream>

#include "cpdet/io.hpp"
#include "cpdet/simlab.hpp"

using namespace cpdet;

namespace {

TEST(IngestCsv, WellFormedPanel) {
  std::istringstream in(
      "activity,t,hr,speed\n"
      "a,1,100,3.1\n"
      "a,2,101,3.2\n"
      "a,3,102,3.3\n"
      "b,1,90,2.1\n"
      "b,2,91,2.2\n"
      "b,3,92,2.3\n");
  const auto got = io::ingest_csv(in);
  EXPECT_EQ(got.panel.N(), 2);
  EXPECT_EQ(got.panel.T(), 3);
  EXPECT_EQ(got.panel.P(), 2);
  EXPECT_EQ(got.var_names, (std::vector<std::string>{"hr", "speed"}));
  EXPECT_EQ(got.activity_labels, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(got.panel.value(2, 3, 1), 92.0);
}

TEST(IngestCsv, EmptyFieldMeansMissing) {
  std::istringstream in(
      "activity,t,hr,speed\n"
      "1,1,100,\n"
      "1,2,,2.0\n");
  const auto got = io::ingest_csv(in);
  EXPECT_TRUE(got.panel.observed(1, 1, 1));
  EXPECT_FALSE(got.panel.observed(1, 1, 2));
  EXPECT_FALSE(got.panel.observed(1, 2, 1));
  EXPECT_TRUE(got.panel.observed(1, 2, 2));
}

TEST(IngestCsv, ShortActivitiesArePaddedMissing) {
  std::istringstream in(
      "activity,t,hr\n"
      "1,1,100\n"
      "1,2,101\n"
      "2,1,90\n");
  const auto got = io::ingest_csv(in);
  EXPECT_EQ(got.panel.T(), 2);
  EXPECT_FALSE(got.panel.observed(2, 2, 1));
}

TEST(IngestCsv, DuplicateRowNamesLine) {
  std::istringstream in(
      "activity,t,hr\n"
      "1,5,100\n"
      "1,5,101\n");
  try {
    io::ingest_csv(in);
    FAIL() << "expected CsvError";
  } catch (const io::CsvError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
}

TEST(IngestCsv, RejectsMalformedInput) {
  std::istringstream bad_header("act,t,hr\n1,1,100\n");
  EXPECT_THROW(io::ingest_csv(bad_header), io::CsvError);

  std::istringstream bad_cell("activity,t,hr\n1,1,abc\n");
  EXPECT_THROW(io::ingest_csv(bad_cell), io::CsvError);

  std::istringstream bad_width("activity,t,hr\n1,1,100,7\n");
  EXPECT_THROW(io::ingest_csv(bad_width), io::CsvError);

  std::istringstream unsorted(
      "activity,t,hr\n"
      "1,1,100\n"
      "2,1,90\n"
      "1,2,101\n");
  EXPECT_THROW(io::ingest_csv(unsorted), io::CsvError);

  std::istringstream bad_t("activity,t,hr\n1,0,100\n");
  EXPECT_THROW(io::ingest_csv(bad_t), io::CsvError);

  std::istringstream empty("");
  EXPECT_THROW(io::ingest_csv(empty), io::CsvError);
}

TEST(Csv, RoundTripIsBitExact) {
  SimSpec spec;
  spec.N = 6;
  spec.T = 10;
  spec.S = 2;
  spec.seed = 123;
  spec.missing_rate = 0.15;
  const auto sc = generate(spec);
  std::stringstream buf;
  io::write_csv(buf, sc.panel);
  const auto got = io::ingest_csv(buf);
  EXPECT_TRUE(got.panel == sc.panel);
}

TEST(Config, RoundTripAndDefaults) {
  io::RunConfig c;
  c.family = "sim";
  c.B = 321;
  c.seed = 99;
  c.deltas = {0.25, 0.75};
  const auto j = c.to_json();
  const auto back = io::RunConfig::from_json(j);
  EXPECT_EQ(back.B, 321);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.deltas, c.deltas);
  EXPECT_EQ(back.gamma.kappa, 0.7);
  EXPECT_EQ(back.n_min, 10);
  EXPECT_EQ(c.hash(), back.hash());

  io::RunConfig other = c;
  other.B = 322;
  EXPECT_NE(other.hash(), c.hash());
}

TEST(Config, MakeThetaPerFamily) {
  io::RunConfig c;
  c.family = "sim";
  c.theta = {{"sigma_eps2", 2.0}, {"sigma_alpha2", 0.1}, {"sigma_d2", 4.0}, {"rho", 0.6}};
  const auto sim = io::make_theta(c);
  EXPECT_EQ(sim.family, Family::Sim);
  EXPECT_EQ(sim.sigma_eps2(), 2.0);
  EXPECT_EQ(sim.rho(), 0.6);

  c.family = "warmup";
  c.theta = nullptr;
  const auto wu = io::make_theta(c);
  EXPECT_EQ(wu.family, Family::Warmup);
  wu.validate();
  EXPECT_EQ(io::make_model_spec(c).M, 3);

  c.family = "nope";
  EXPECT_THROW(io::make_theta(c), std::runtime_error);
}

TEST(Config, CustomModelFromJson) {
  io::RunConfig c;
  c.family = "custom";
  c.theta = {{"Sigma", {{1.0, 0.0}, {0.0, 1.0}}},
             {"Psi", {{0.5}}},
             {"Delta", {{2.0, 0.0}, {0.0, 2.0}}}};
  c.custom_model = {{"Z_S", {{1.0}, {0.0}}},
                    {"Z_A", {{1.0, 0.0}, {0.0, 1.0}}},
                    {"T_S", {{0.9}}},
                    {"T_A", {{0.5, 0.0}, {0.0, 0.5}}}};
  const auto spec = io::make_model_spec(c);
  EXPECT_EQ(spec.P, 2);
  EXPECT_EQ(spec.M, 1);
  EXPECT_EQ(spec.K, 2);
  const auto theta = io::make_theta(c);
  const auto bound = bind_design(spec, theta);
  EXPECT_EQ(bound.T_A(0, 0), 0.5);
  EXPECT_EQ(bound.P1_S(0, 0), ModelSpec::kDiffuseVariance);
}

TEST(Records, CarryHashAndSeed) {
  std::ostringstream out;
  io::RecordWriter w(out, "deadbeef", 42);
  w.write({{"type", "x"}, {"v", 1}});
  w.write({{"type", "y"}});
  std::istringstream in(out.str());
  std::string line;
  int count = 0;
  while (std::getline(in, line)) {
    const auto j = io::json::parse(line);
    EXPECT_EQ(j.at("config_hash"), "deadbeef");
    EXPECT_EQ(j.at("seed"), 42);
    ++count;
  }
  EXPECT_EQ(count, 2);
}

}  // namespace
