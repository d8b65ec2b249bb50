#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "towertrain/data_io.hpp"
#include "towertrain/evaluation.hpp"
#include "towertrain/synth.hpp"

using namespace towertrain;
namespace fs = std::filesystem;

namespace {

// The binary under test is handed over by the build via TOWERTRAIN_BIN.
std::string binary() {
    const char* bin = std::getenv("TOWERTRAIN_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "TOWERTRAIN_BIN must point at the CLI binary");
    return bin;
}

struct Workdir {
    fs::path dir;
    Workdir() {
        dir = fs::temp_directory_path() / ("towertrain_cli_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~Workdir() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }
    std::string file(const std::string& name) const { return (dir / name).string(); }
};

int run_cli(const std::string& args, const std::string& capture = "") {
    std::string cmd = '"' + binary() + "\" " + args;
    if (!capture.empty())
        cmd += " >" + capture + " 2>&1";
    else
        cmd += " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("training runs end to end") {
    const Workdir wd;
    const ObservedSet all = clustered_interactions(30, 20, 120, 4, 0.9, 5);
    const auto [train, test] = make_split(all, 0.8, 7);
    save_interactions(wd.file("train.txt"), train);
    save_interactions(wd.file("test.txt"), test);

    const std::string base = "train --set dataset.train=" + wd.file("train.txt") +
                             " --set model.hidden=8 --set model.k=4 --set max_passes=4" +
                             " --set workers=2";

    SUBCASE("full-batch descent with a trace file") {
        const std::string out = wd.file("out.txt");
        const int rc = run_cli(base + " --set trace.path=" + wd.file("trace.csv"), out);
        CHECK(rc == 0);
        const std::string text = slurp(out);
        CHECK(text.find("initial objective") != std::string::npos);
        const auto trace = read_trace(wd.file("trace.csv"));
        REQUIRE(trace.size() == 4);
        double prev = trace[0].objective;
        for (const TraceRecord& r : trace) {
            CHECK(r.objective <= prev + 1e-12);
            prev = r.objective;
        }
    }
    SUBCASE("identical seeds give identical traces") {
        CHECK(run_cli(base + " --set seed=9 --set trace.path=" + wd.file("t1.csv")) == 0);
        CHECK(run_cli(base + " --set seed=9 --set trace.path=" + wd.file("t2.csv")) == 0);
        const auto t1 = read_trace(wd.file("t1.csv"));
        const auto t2 = read_trace(wd.file("t2.csv"));
        REQUIRE(t1.size() == t2.size());
        for (std::size_t t = 0; t < t1.size(); ++t) {
            CHECK(t1[t].objective == t2[t].objective);   // bitwise
            CHECK(t1[t].step_size == t2[t].step_size);
            CHECK(t1[t].step == t2[t].step);
        }
    }
    SUBCASE("config file and preset") {
        {
            std::ofstream cfg(wd.file("run.cfg"));
            cfg << "# toy run\n";
            cfg << "dataset.train = " << wd.file("train.txt") << "\n";
            cfg << "model.hidden = none\n";
            cfg << "model.k = 4\n";
            cfg << "max_passes = 2\n";
        }
        CHECK(run_cli("train --config " + wd.file("run.cfg") + " --preset ml1m") == 0);
        CHECK(run_cli("train --config " + wd.file("run.cfg") + " --preset bogus") == 2);
    }
    SUBCASE("train and evaluate a checkpoint") {
        const std::string model = wd.file("model.ckpt");
        CHECK(run_cli(base + " --set dataset.test=" + wd.file("test.txt") +
                      " --save-model " + model) == 0);
        const std::string out = wd.file("eval.txt");
        const int rc = run_cli("eval --model " + model + " --test " + wd.file("test.txt") +
                                   " --train " + wd.file("train.txt"),
                               out);
        CHECK(rc == 0);
        const std::string text = slurp(out);
        const auto at = text.find("map@5");
        REQUIRE(at != std::string::npos);
        const double value = std::stod(text.substr(at + 5));
        CHECK(value >= 0.0);
        CHECK(value <= 1.0);
    }
    SUBCASE("stochastic method smoke run") {
        CHECK(run_cli(base + " --set method=sogram-diag --set sg.rho=0.25" +
                      " --set max_passes=2") == 0);
    }

    SUBCASE("configuration errors exit with 2") {
        CHECK(run_cli(base + " --set bogus.key=1") == 2);
        CHECK(run_cli("train --set model.k=4") == 2);  // no dataset.train
        CHECK(run_cli(base + " --set method=adam") == 2);
        CHECK(run_cli(base + " --set max_passes=abc") == 2);
        CHECK(run_cli(base + " --set malformed") == 2);
        CHECK(run_cli("train --no-such-flag") == 2);
    }
    SUBCASE("data errors exit with 3") {
        CHECK(run_cli("train --set dataset.train=" + wd.file("absent.txt")) == 3);
        const std::string bad = wd.file("bad.txt");
        std::ofstream(bad) << "1 nope 2\n";
        CHECK(run_cli("train --set dataset.train=" + bad) == 3);
    }
    SUBCASE("numeric blowups exit with 4") {
        CHECK(run_cli(base + " --set loss=squared --set method=sg-doubly" +
                      " --set sg.step_size=1000000 --set sg.rho=0.5 --set max_passes=3") == 4);
    }
}

TEST_CASE("verification subcommands") {
    SUBCASE("gradient check") {
        CHECK(run_cli("gradcheck --instances 8") == 0);
        CHECK(run_cli("gradcheck --instances 3 --corrupt") == 5);
    }
    SUBCASE("reference comparison") {
        CHECK(run_cli("oracle-compare --instances 6") == 0);
    }
}
