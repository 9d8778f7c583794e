// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "trajattr/config.hpp"
#include "trajattr/errors.hpp"

using namespace trajattr;
namespace fs = std::filesystem;

#ifndef TRAJATTR_CLI_PATH
#define TRAJATTR_CLI_PATH "trajattr"
#endif

TEST_SUITE_BEGIN("cli");

namespace {

struct CliSandbox {
    fs::path dir;
    CliSandbox() : dir(fs::temp_directory_path() / "trajattr_cli_test") {
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream cfg(dir / "cfg.json");
        cfg << R"({
  "seed": 3,
  "out_dir": ")" << (dir / "out").string() << R"(",
  "dataset": {"n_train": 128, "n_val": 48, "n_test": 48, "d": 6, "classes": 3,
              "spread": 0.8},
  "model": {"hidden": [6]},
  "schedule": {"batch_size": 16, "epochs": 1},
  "oracle": {"num_samples": 12, "num_val": 10}
})";
    }
    ~CliSandbox() { fs::remove_all(dir); }

    int run(const std::string& args) const {
        const std::string cmd = std::string(TRAJATTR_CLI_PATH) + " " + args +
                                " -c " + (dir / "cfg.json").string() +
                                " > /dev/null 2> " +
                                (dir / "stderr.txt").string();
        const int status = std::system(cmd.c_str());
        return WEXITSTATUS(status);
    }

    std::string stderr_text() const {
        std::ifstream in(dir / "stderr.txt");
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    std::string slurp(const std::string& rel) const {
        std::ifstream in(dir / "out" / rel);
        REQUIRE(in.good());
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }
};

}  // namespace

TEST_CASE("attribute before train raises a dependency error naming train") {
    CliSandbox box;
    CHECK(box.run("attribute --estimator adamw") == 3);
    CHECK(box.stderr_text().find("\"producing_command\":\"train\"") !=
          std::string::npos);
}

TEST_CASE("end-to-end smoke pipeline produces a fidelity table") {
    CliSandbox box;
    REQUIRE(box.run("train") == 0);
    REQUIRE(box.run("attribute --estimator adamw") == 0);
    REQUIRE(box.run("attribute --estimator sgd") == 0);
    REQUIRE(box.run("tsloo") == 0);
    REQUIRE(box.run("fidelity") == 0);

    const std::string table = box.slurp("fidelity.csv");
    CHECK(table.find("# config_digest=") == 0);
    CHECK(table.find("adamw") != std::string::npos);
    CHECK(table.find("sgd") != std::string::npos);

    // Downstream analyses run off the same artifacts.
    REQUIRE(box.run("decompose") == 0);
    REQUIRE(box.run("proxy") == 0);
    CHECK(box.slurp("proxy/fit.csv").find("slope") != std::string::npos);
}

TEST_CASE("reruns with the same config are byte-identical") {
    CliSandbox box;
    REQUIRE(box.run("train") == 0);
    REQUIRE(box.run("attribute --estimator adamw") == 0);
    const std::string first = box.slurp("attr/adamw/scores.csv");
    REQUIRE(box.run("attribute --estimator adamw") == 0);
    CHECK(box.slurp("attr/adamw/scores.csv") == first);

    REQUIRE(box.run("tsloo") == 0);
    const std::string tsloo_first = box.slurp("tsloo/tsloo.csv");
    REQUIRE(box.run("tsloo") == 0);
    CHECK(box.slurp("tsloo/tsloo.csv") == tsloo_first);
}

TEST_CASE("unknown config keys are rejected with their paths") {
    CliSandbox box;
    std::ofstream bad(box.dir / "cfg.json", std::ios::trunc);
    bad << R"({"seed": 1, "optimizer": {"lr": 1e-3, "momentum": 0.9}})";
    bad.close();
    CHECK(box.run("train") == 2);
    CHECK(box.stderr_text().find("optimizer.momentum") != std::string::npos);
}

TEST_CASE("config overrides reach the artifacts") {
    CliSandbox box;
    REQUIRE(box.run("train --set optimizer.lr=5e-4") == 0);
    const std::string resolved = box.slurp("traj/config.resolved.json");
    CHECK(resolved.find("0.0005") != std::string::npos);
}

TEST_CASE("report merges matching digests and refuses mismatches") {
    CliSandbox box;
    REQUIRE(box.run("train") == 0);
    REQUIRE(box.run("attribute --estimator adamw") == 0);
    REQUIRE(box.run("tsloo") == 0);
    REQUIRE(box.run("fidelity") == 0);
    const std::string fid = (box.dir / "out" / "fidelity.csv").string();
    REQUIRE(box.run("report --inputs " + fid + " " + fid) == 0);
    CHECK(box.slurp("report.csv").find("source,") != std::string::npos);

    // Forge a mismatched digest.
    const std::string forged = (box.dir / "forged.csv").string();
    {
        std::ofstream out(forged);
        out << "# config_digest=deadbeefdeadbeef\nsetting\nx\n";
    }
    CHECK(box.run("report --inputs " + fid + " " + forged) == 2);
    CHECK(box.stderr_text().find("mismatched") != std::string::npos);
}

TEST_CASE("config digest is stable across load paths") {
    ExperimentConfig a = ExperimentConfig::from_json_text(
        R"({"seed": 9, "optimizer": {"lr": 0.01}})", {});
    ExperimentConfig b = ExperimentConfig::from_json_text(
        R"({"optimizer": {"lr": 0.01}, "seed": 9})", {});
    CHECK(a.digest() == b.digest());
    ExperimentConfig c = ExperimentConfig::from_json_text(
        R"({"seed": 9, "optimizer": {"lr": 0.02}})", {});
    CHECK(a.digest() != c.digest());

    // Overrides change the digest the same way as inline values.
    ExperimentConfig d = ExperimentConfig::from_json_text(
        R"({"seed": 9})", {"optimizer.lr=0.02"});
    CHECK(d.digest() == c.digest());
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(
                        R"({"seed": 9})", {"optimizer.nope=1"}),
                    invalid_input_error);
}

TEST_CASE("gen-data then file-kind training consumes the artifacts") {
    CliSandbox box;
    REQUIRE(box.run("gen-data") == 0);
    const std::string data_dir = (box.dir / "out" / "data").string();
    std::ofstream cfg(box.dir / "cfg.json", std::ios::trunc);
    cfg << R"({
  "seed": 3,
  "out_dir": ")" << (box.dir / "out2").string() << R"(",
  "dataset": {"kind": "file",
              "train_path": ")" << data_dir << R"(/train.bin",
              "val_path": ")" << data_dir << R"(/val.bin",
              "test_path": ")" << data_dir << R"(/test.bin"},
  "model": {"hidden": [6]},
  "schedule": {"batch_size": 16, "epochs": 1}
})";
    cfg.close();
    const std::string cmd = std::string(TRAJATTR_CLI_PATH) + " train -c " +
                            (box.dir / "cfg.json").string() +
                            " > /dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(fs::exists(box.dir / "out2" / "traj" / "manifest.txt"));
}

TEST_SUITE_END();
