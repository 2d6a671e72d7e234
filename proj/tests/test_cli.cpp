#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string cli_binary() {
    const char* env = std::getenv("COHESION_CLI");
    REQUIRE_MESSAGE(env != nullptr, "COHESION_CLI must point at the cli binary");
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args, const fs::path& workdir) {
    const fs::path log = workdir / "cli_output.log";
    const std::string command =
        "cd '" + workdir.string() + "' && '" + cli_binary() + "' " + args + " > '" +
        log.string() + "' 2>&1";
    const int status = std::system(command.c_str());
    RunResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream buffer;
    buffer << in.rdbuf();
    result.output = buffer.str();
    return result;
}

json load_json(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE_MESSAGE(in.good(), "missing file: ", path.string());
    return json::parse(in);
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// Relative paths and file bytes of every regular file under a directory.
std::vector<std::pair<std::string, std::string>> tree_contents(const fs::path& root) {
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file())
            entries.emplace_back(fs::relative(entry.path(), root).string(),
                                 read_bytes(entry.path()));
    std::sort(entries.begin(), entries.end());
    return entries;
}

// One small dataset shared by the training-flow cases.
const fs::path& shared_dataset() {
    static TempDir dir("cohesion_cli_shared_data");
    static bool generated = false;
    if (!generated) {
        auto r = run_cli("synth --out data --samples 90 --seed 21", dir.path);
        REQUIRE_MESSAGE(r.exit_code == 0, r.output);
        generated = true;
    }
    return dir.path;
}

}  // namespace

TEST_CASE("synth is byte-identical per seed and reports counts") {
    TempDir dir("cohesion_cli_synth");
    auto first = run_cli("synth --out a --samples 30 --seed 7", dir.path);
    CHECK(first.exit_code == 0);
    auto second = run_cli("synth --out b --samples 30 --seed 7", dir.path);
    CHECK(second.exit_code == 0);
    CHECK(tree_contents(dir.path / "a") == tree_contents(dir.path / "b"));

    auto summary = json::parse(second.output);
    CHECK(summary["samples"] == 30);
    CHECK(summary["train"].get<int>() + summary["val"].get<int>() + summary["test"].get<int>() ==
          30);
    CHECK(fs::exists(dir.path / "b" / "manifest.jsonl"));

    auto third = run_cli("synth --out c --samples 30 --seed 8", dir.path);
    CHECK(third.exit_code == 0);
    CHECK(tree_contents(dir.path / "a") != tree_contents(dir.path / "c"));
}

TEST_CASE("synth respects a fixed faces-per-group range") {
    TempDir dir("cohesion_cli_synth_faces");
    auto r = run_cli("synth --out d --samples 20 --seed 3 --faces-min 3 --faces-max 3", dir.path);
    CHECK(r.exit_code == 0);
    std::ifstream manifest(dir.path / "d" / "manifest.jsonl");
    std::string line;
    std::getline(manifest, line);  // header
    std::size_t records = 0;
    while (std::getline(manifest, line)) {
        auto record = json::parse(line);
        CHECK(record["boxes"].size() == 3);
        ++records;
    }
    CHECK(records == 20);
}

TEST_CASE("train writes a parsable report with a best-validation curve") {
    const auto& dir = shared_dataset();
    auto r = run_cli(
        "train --manifest data/manifest.jsonl --model face-level --epochs 8 "
        "--pretrain-epochs 1 --seed 4 --out run",
        dir);
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(dir / "run" / "checkpoint.ckpt"));

    auto report = load_json(dir / "run" / "report.json");
    CHECK(report["model"] == "face-level");
    CHECK(report["metrics"].contains("val_mse"));
    const auto& epochs = report["head"]["epochs"];
    CHECK(epochs.size() == 8);
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> best_curve;
    for (const auto& e : epochs) {
        best = std::min(best, e["val_loss"].get<double>());
        best_curve.push_back(best);
    }
    for (std::size_t i = 1; i < best_curve.size(); ++i) CHECK(best_curve[i] <= best_curve[i - 1]);
    CHECK(report["head"]["best_val_loss"].get<double>() == best_curve.back());
}

TEST_CASE("same seed reproduces the metrics summary and checkpoint bytes") {
    const auto& dir = shared_dataset();
    const std::string args =
        "train --manifest data/manifest.jsonl --model face-level --epochs 6 "
        "--pretrain-epochs 1 --seed 11 --out ";
    auto first = run_cli(args + "rep_a", dir);
    REQUIRE_MESSAGE(first.exit_code == 0, first.output);
    auto second = run_cli(args + "rep_b", dir);
    REQUIRE_MESSAGE(second.exit_code == 0, second.output);

    auto a = load_json(dir / "rep_a" / "report.json");
    auto b = load_json(dir / "rep_b" / "report.json");
    CHECK(a["metrics"] == b["metrics"]);
    CHECK(read_bytes(dir / "rep_a" / "checkpoint.ckpt") ==
          read_bytes(dir / "rep_b" / "checkpoint.ckpt"));
}

TEST_CASE("eval reproduces the training-time validation score from the checkpoint") {
    const auto& dir = shared_dataset();
    auto train = run_cli(
        "train --manifest data/manifest.jsonl --model face-level --epochs 6 "
        "--pretrain-epochs 1 --seed 2 --out roundtrip",
        dir);
    REQUIRE_MESSAGE(train.exit_code == 0, train.output);
    auto report = load_json(dir / "roundtrip" / "report.json");

    auto eval = run_cli(
        "eval --manifest data/manifest.jsonl --checkpoint roundtrip/checkpoint.ckpt --split val",
        dir);
    REQUIRE_MESSAGE(eval.exit_code == 0, eval.output);
    auto metrics = json::parse(eval.output)["metrics"];
    CHECK(metrics["mse"].get<double>() == report["metrics"]["val_mse"].get<double>());
}

TEST_CASE("multitask training reports loss components and powers saliency export") {
    const auto& dir = shared_dataset();
    auto train = run_cli(
        "train --manifest data/manifest.jsonl --model multitask --epochs 2 --image-size 32 "
        "--seed 6 --out mt",
        dir);
    REQUIRE_MESSAGE(train.exit_code == 0, train.output);
    auto report = load_json(dir / "mt" / "report.json");
    CHECK(report["epochs"].size() == 2);
    for (const auto& e : report["epochs"]) {
        CHECK(e.contains("cross_entropy"));
        CHECK(e.contains("squared_error"));
    }

    // Saliency output has the input's extents and uses the full byte range.
    std::string image;
    {
        std::ifstream manifest(dir / "data" / "manifest.jsonl");
        std::string line;
        std::getline(manifest, line);
        std::getline(manifest, line);
        image = json::parse(line)["image"].get<std::string>();
    }
    auto sal = run_cli("saliency --checkpoint mt/checkpoint.ckpt --image data/" + image +
                           " --out map.pgm",
                       dir);
    REQUIRE_MESSAGE(sal.exit_code == 0, sal.output);
    auto bytes = read_bytes(dir / "map.pgm");
    CHECK(bytes.substr(0, 2) == "P5");
    std::istringstream header(bytes.substr(2));
    std::size_t width = 0, height = 0, maxval = 0;
    header >> width >> height >> maxval;
    CHECK(width == 96);
    CHECK(height == 96);
    CHECK(maxval == 255);
    const std::string body = bytes.substr(bytes.size() - width * height);
    unsigned char lo = 255, hi = 0;
    for (const char c : body) {
        lo = std::min(lo, static_cast<unsigned char>(c));
        hi = std::max(hi, static_cast<unsigned char>(c));
    }
    CHECK(lo == 0);
    CHECK(hi == 255);
}

TEST_CASE("crossval emits fold rows whose average matches their mean") {
    const auto& dir = shared_dataset();
    auto r = run_cli(
        "crossval --manifest data/manifest.jsonl --folds 5 --epochs 4 --pretrain-epochs 1 "
        "--seed 9 --out cv",
        dir);
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    auto report = load_json(dir / "cv" / "crossval.json");
    const auto& rows = report["rows"];
    REQUIRE(rows.size() == 6);
    double sum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(rows[i]["fold"] == i + 1);
        sum += rows[i]["mse"].get<double>();
    }
    CHECK(rows[5]["fold"] == "average");
    CHECK(rows[5]["mse"].get<double>() == doctest::Approx(sum / 5.0).epsilon(1e-9));
}

TEST_CASE("stats reports perfect agreement for identical raters") {
    TempDir dir("cohesion_cli_stats");
    std::ofstream file(dir.path / "ann.txt");
    file << "r1 r2 r3\n0 0 0\n1 1 1\n2 2 2\n3 3 3\n1 1 1\n";
    file.close();
    auto r = run_cli("stats --annotations ann.txt", dir.path);
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    auto report = json::parse(r.output);
    CHECK(report["average_variance"].get<double>() == 0.0);
    CHECK(report["eigenvalue_shares"][0].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report["mean_kappa"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& pk : report["pairwise_kappas"])
        CHECK(pk["kappa"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("stats rejects malformed input naming the offending line") {
    TempDir dir("cohesion_cli_stats_bad");
    std::ofstream file(dir.path / "bad.txt");
    file << "r1 r2 r3\n0 1 2\n1 oops 2\n";
    file.close();
    auto r = run_cli("stats --annotations bad.txt", dir.path);
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("bad.txt:3") != std::string::npos);

    // A single-rater matrix is structurally invalid input data, rejected
    // with the file named in the message.
    std::ofstream single(dir.path / "single.txt");
    single << "r1\n0\n1\n";
    single.close();
    auto s = run_cli("stats --annotations single.txt", dir.path);
    CHECK(s.exit_code == 3);
    CHECK(s.output.find("single.txt") != std::string::npos);
    CHECK(s.output.find("2 raters") != std::string::npos);
}

TEST_CASE("exit codes separate usage errors from runtime failures") {
    TempDir dir("cohesion_cli_exits");
    auto unknown = run_cli("train --definitely-not-a-flag", dir.path);
    CHECK(unknown.exit_code == 2);
    CHECK_FALSE(unknown.output.empty());

    auto bad_model = run_cli("train --manifest m.jsonl --model hologram", dir.path);
    CHECK(bad_model.exit_code == 2);

    auto no_sub = run_cli("", dir.path);
    CHECK(no_sub.exit_code == 2);

    auto missing_manifest = run_cli("train --manifest missing/manifest.jsonl", dir.path);
    CHECK(missing_manifest.exit_code == 3);

    auto missing_ckpt =
        run_cli("eval --manifest missing/manifest.jsonl --checkpoint nothing.ckpt", dir.path);
    CHECK(missing_ckpt.exit_code == 3);

    auto help = run_cli("--help", dir.path);
    CHECK(help.exit_code == 0);
    CHECK(help.output.find("train") != std::string::npos);
}

TEST_CASE("config file values apply beneath command-line flags") {
    const auto& dir = shared_dataset();
    std::ofstream cfg(dir / "run.ini");
    cfg << "[train]\nmanifest=data/manifest.jsonl\nmodel=face-level\nepochs=5\n"
           "pretrain-epochs=1\nout=cfg_run\n";
    cfg.close();
    auto from_config = run_cli("train --config run.ini", dir);
    REQUIRE_MESSAGE(from_config.exit_code == 0, from_config.output);
    auto report = load_json(dir / "cfg_run" / "report.json");
    CHECK(report["optimizer"]["epochs"] == 5);

    auto overridden = run_cli("train --config run.ini --epochs 3 --out cfg_run2", dir);
    REQUIRE_MESSAGE(overridden.exit_code == 0, overridden.output);
    auto report2 = load_json(dir / "cfg_run2" / "report.json");
    CHECK(report2["optimizer"]["epochs"] == 3);
}
