#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pgc/io.hpp"

using namespace pgc;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

fs::path temp_dir() {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / ("pgc_cli_test_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunResult run_cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "run.log";
    const std::string cmd = std::string(PGC_CLI_PATH) + " " + args + " > " +
                            log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("cli: dict with defaults reports the expected rank and energy") {
    const fs::path dir = temp_dir();
    RunResult r = run_cli("dict --out " + (dir / "d").string(), dir);
    REQUIRE(r.exit_code == 0);

    nlohmann::json meta = read_json(dir / "d" / "dictionary.json");
    CHECK(meta["retained_count"].get<int>() == 4);
    CHECK(meta["energy_ratio"].get<double>() >= 0.999);

    // the saved dictionary loads back bit-identical to an in-process build
    KernelDictionary loaded = load_dictionary(dir / "d");
    KernelDictionary built = build_dictionary(DictionaryConfig{});
    CHECK(loaded.eigen_kernels == built.eigen_kernels);
    CHECK(loaded.sigma_grid == built.sigma_grid);
}

TEST_CASE("cli: even kernel size is rejected with a message naming the flag") {
    const fs::path dir = temp_dir();
    RunResult r = run_cli("dict --k 6", dir);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("--k") != std::string::npos);
}

TEST_CASE("cli: filter exact vs approx stays within the low-rank bound") {
    const fs::path dir = temp_dir();
    Rng rng(11);
    Tensorf x(3, 16, 16);
    for (float& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    Mapf p(16, 16);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) p.at(i, j) = 0.5f + 0.05f * float(i);
    save_tensor(dir / "x.ftns", x);
    save_map(dir / "p.ftns", p);

    const std::string common = " --input " + (dir / "x.ftns").string() + " --perspective " +
                               (dir / "p.ftns").string() + " --a 0.6 --p0 -0.2";
    RunResult re = run_cli("filter --mode exact --out " + (dir / "ye.ftns").string() + common, dir);
    RunResult ra = run_cli("filter --mode approx --out " + (dir / "ya.ftns").string() + common, dir);
    REQUIRE(re.exit_code == 0);
    REQUIRE(ra.exit_code == 0);

    Tensorf ye = load_tensor(dir / "ye.ftns");
    Tensorf ya = load_tensor(dir / "ya.ftns");
    CHECK(rel_l2_error(ya, ye) <= 1e-2);
}

TEST_CASE("cli: zero blur scale degenerates to the identity, payload byte-equal") {
    const fs::path dir = temp_dir();
    Rng rng(12);
    Tensorf x(2, 12, 12);
    for (float& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    Mapf p(12, 12, 1.0f);
    save_tensor(dir / "x.ftns", x);
    save_map(dir / "p.ftns", p);

    RunResult r = run_cli("filter --mode approx --a 0 --input " + (dir / "x.ftns").string() +
                              " --perspective " + (dir / "p.ftns").string() + " --out " +
                              (dir / "y.ftns").string(),
                          dir);
    REQUIRE(r.exit_code == 0);
    CHECK(slurp(dir / "y.ftns") == slurp(dir / "x.ftns"));
}

TEST_CASE("cli: missing input file exits with the data error code") {
    const fs::path dir = temp_dir();
    RunResult r = run_cli("filter --input " + (dir / "nope.ftns").string() + " --perspective " +
                              (dir / "nope.ftns").string() + " --out " + (dir / "y.ftns").string(),
                          dir);
    CHECK(r.exit_code == 3);
}

TEST_CASE("cli: unknown flag and missing subcommand are usage errors") {
    const fs::path dir = temp_dir();
    CHECK(run_cli("dict --bogus 1", dir).exit_code == 2);
    CHECK(run_cli("", dir).exit_code == 2);
}

TEST_CASE("cli: eval on identical count lists reports zero error") {
    const fs::path dir = temp_dir();
    std::ofstream(dir / "a.csv") << "3\n17.5\n0\n";
    std::ofstream(dir / "b.csv") << "3\n17.5\n0\n";
    RunResult r = run_cli("eval --pred " + (dir / "a.csv").string() + " --gt " +
                              (dir / "b.csv").string() + " --out " + (dir / "m.json").string(),
                          dir);
    REQUIRE(r.exit_code == 0);
    nlohmann::json m = read_json(dir / "m.json");
    CHECK(m["mae"].get<double>() == 0.0);
    CHECK(m["mse"].get<double>() == 0.0);

    // mismatched lengths are a data problem, not a crash
    std::ofstream(dir / "c.csv") << "3\n";
    CHECK(run_cli("eval --pred " + (dir / "a.csv").string() + " --gt " + (dir / "c.csv").string(),
                  dir)
              .exit_code != 0);
}

TEST_CASE("cli: bench emits a JSON report with a positive speedup") {
    const fs::path dir = temp_dir();
    RunResult r = run_cli(
        "bench --channels 2 --height 16 --width 16 --reps 3 --seed 4 --out " +
            (dir / "b.json").string() + " --csv " + (dir / "b.csv").string(),
        dir);
    REQUIRE(r.exit_code == 0);
    nlohmann::json j = read_json(dir / "b.json");
    CHECK(j["speedup"].get<double>() > 0.0);
    CHECK(j["reps"].get<int>() == 3);
    std::string csv = slurp(dir / "b.csv");
    CHECK(csv.rfind("rep,exact_ms,approx_ms", 0) == 0);
}

TEST_CASE("cli: synth then train for zero epochs leaves the seed-initialized network") {
    const fs::path dir = temp_dir();
    REQUIRE(run_cli("synth --height 32 --width 32 --count 8 --scenes 2 --seed 9 --out " +
                        (dir / "scenes").string(),
                    dir)
                .exit_code == 0);
    REQUIRE(run_cli("train --data " + (dir / "scenes").string() +
                        " --blocks 1 --epochs 0 --seed 21 --out " + (dir / "run").string(),
                    dir)
                .exit_code == 0);

    Network<float> trained = load_network<float>(dir / "run" / "checkpoint");
    Network<float> fresh = build_toy_net<float>(trained.config, 21);
    Scene first = load_scene(dir / "scenes" / "scene_0000");
    calibrate_perspective(fresh, first.gt_perspective);

    std::vector<ParamRef<float>> ra = trained.param_refs(), rb = fresh.param_refs();
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i)
        for (std::size_t t = 0; t < ra[i].n; ++t) CHECK(ra[i].data[t] == rb[i].data[t]);
}

TEST_CASE("cli: training runs are deterministic given the seed") {
    const fs::path dir = temp_dir();
    const std::string synth = "synth --height 32 --width 32 --count 8 --scenes 2 --seed 9 --out " +
                              (dir / "scenes").string();
    REQUIRE(run_cli(synth, dir).exit_code == 0);
    const std::string train_args = "train --data " + (dir / "scenes").string() +
                                   " --blocks 1 --epochs 2 --seed 13 --out ";
    REQUIRE(run_cli(train_args + (dir / "r1").string(), dir).exit_code == 0);
    REQUIRE(run_cli(train_args + (dir / "r2").string(), dir).exit_code == 0);
    CHECK(slurp(dir / "r1" / "loss.csv") == slurp(dir / "r2" / "loss.csv"));
    for (const fs::directory_entry& e : fs::directory_iterator(dir / "r1" / "checkpoint"))
        CHECK(slurp(e.path()) == slurp(dir / "r2" / "checkpoint" / e.path().filename()));
}

TEST_CASE("cli: gradcheck passes on a one-block network") {
    const fs::path dir = temp_dir();
    RunResult r = run_cli("gradcheck --blocks 1 --seed 3", dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("\"pass\": true") != std::string::npos);
}

TEST_CASE("cli: invalid PGC_THREADS value is a usage error") {
    const fs::path dir = temp_dir();
    const fs::path log = dir / "env.log";
    const std::string cmd = std::string("PGC_THREADS=abc ") + PGC_CLI_PATH + " dict > " +
                            log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(raw) == 2);
    const std::string cmd2 = std::string("PGC_THREADS=2 ") + PGC_CLI_PATH + " dict > " +
                             log.string() + " 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd2.c_str())) == 0);
}
