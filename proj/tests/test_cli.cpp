#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pcgen/data.hpp"
#include "pcgen/export.hpp"
#include "pcgen/metrics.hpp"
#include "pcgen/model.hpp"
#include "pcgen/tnsr.hpp"

using namespace pcgen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "pcgen_test_cli";

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Runs the CLI inside kWork with stdout/stderr captured.
Run cli(const std::string& args, const std::string& env = "") {
    fs::create_directories(kWork);
    const auto o = kWork / "stdout.txt", e = kWork / "stderr.txt";
    const std::string cmd = "cd '" + kWork.string() + "' && " + env + " '" PCGEN_CLI "' " + args + " >'" + o.string() +
                            "' 2>'" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Relative paths of every regular file under `root`.
std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

// Same file set with equal bytes, ignoring the named files.
void check_trees_equal(const fs::path& a, const fs::path& b, const std::vector<std::string>& ignore) {
    const auto fa = files_under(a), fb = files_under(b);
    REQUIRE(fa == fb);
    for (const auto& f : fa) {
        if (std::find(ignore.begin(), ignore.end(), f.filename().string()) != ignore.end()) continue;
        INFO(f.string());
        CHECK(slurp(a / f) == slurp(b / f));
    }
}

const std::string kConfig = R"({"model": {"scale_preset": "desk"},
 "train": {"phase1_epochs": 2, "phase2_epochs": 1, "render_upsample": 3},
 "data": {"root": "ds"}})";

// Dataset + config written once; the tests share kWork.
void ensure_dataset() {
    static bool done = false;
    if (done) return;
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    const auto r = cli("synth --count 12 --seed 7 --points 1000 --out ds");
    REQUIRE(r.code == 0);
    std::ofstream(kWork / "cfg.json") << kConfig;
    done = true;
}

void ensure_trained() {
    static bool done = false;
    ensure_dataset();
    if (done) return;
    const auto r = cli("train --config cfg.json --out run --quiet", "PCGEN_DETERMINISTIC=1");
    INFO(r.err);
    REQUIRE(r.code == 0);
    done = true;
}

}  // namespace

TEST_CASE("synth: 12 objects + manifest, reruns are bitwise identical") {
    ensure_dataset();
    const auto m = load_dataset(kWork / "ds", 0);
    CHECK(m.objects.size() == 12u);
    CHECK(m.corrupt.empty());
    CHECK(m.image_size == 32);
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(kWork / "ds")) dirs += e.is_directory();
    CHECK(dirs == 12u);
    CHECK(read_json(kWork / "ds" / "synth.resolved.json").at("synth").at("seed") == 7);

    REQUIRE(cli("synth --count 12 --seed 7 --points 1000 --out ds_again").code == 0);
    check_trees_equal(kWork / "ds", kWork / "ds_again", {"synth.resolved.json"});

    REQUIRE(cli("synth --count 2 --seed 8 --points 1000 --out ds_other").code == 0);
    CHECK(slurp(kWork / "ds" / "obj0000" / "cloud.tnsr") != slurp(kWork / "ds_other" / "obj0000" / "cloud.tnsr"));
}

TEST_CASE("synth: --count 0 gives a valid empty manifest and a warning") {
    ensure_dataset();
    const auto r = cli("synth --count 0 --out empty");
    CHECK(r.code == 0);
    CHECK(r.err.find("warning") != std::string::npos);
    const auto m = load_dataset(kWork / "empty", 0);
    CHECK(m.objects.empty());
    CHECK(m.corrupt.empty());
}

TEST_CASE("synth / train: usage and config errors") {
    ensure_dataset();
    CHECK(cli("").code == 1);
    CHECK(cli("synth --out x").code == 1);
    CHECK(cli("synth --count 1 --kinds teapot --out x").code == 1);

    std::ofstream(kWork / "bad_range.json") << R"({"train": {"batch_size": 0}, "data": {"root": "ds"}})";
    auto r = cli("train --config bad_range.json --out bad");
    CHECK(r.code == 1);
    CHECK(r.err.find("train.batch_size") != std::string::npos);
    CHECK(r.err.find(">= 1") != std::string::npos);

    std::ofstream(kWork / "bad_field.json") << R"({"train": {"learning_rate": 1}, "data": {"root": "ds"}})";
    r = cli("train --config bad_field.json --out bad");
    CHECK(r.code == 1);
    CHECK(r.err.find("learning_rate") != std::string::npos);

    r = cli("train --config cfg.json --out bad --phase 2");
    CHECK(r.code == 1);
    CHECK(r.err.find("--resume") != std::string::npos);

    CHECK(cli("train --config cfg.json --out bad --phase 2 --resume nowhere").code == 2);
    CHECK(cli("train --data missing_root --out bad").code == 2);
}

TEST_CASE("eval: GT-as-prediction row is near zero and the CSV round-trips") {
    ensure_dataset();
    const auto r = cli("eval --gt-as-prediction --data ds --split all --out ev_gt");
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("Pred->GT") != std::string::npos);
    CHECK(r.out.find("0 flagged") != std::string::npos);

    std::ifstream f(kWork / "ev_gt" / "report.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "method,phase,pred_to_gt_x100,gt_to_pred_x100,points");
    f.seekg(0);
    const auto rows = read_report_csv(f);
    REQUIRE(rows.size() == 1u);
    const auto m = load_dataset(kWork / "ds", 0);
    const double delta_x100 = 100.0 * half_pixel_offset(4.5, m.views.intrinsics());
    CHECK(rows[0].method == "gt");
    CHECK(rows[0].pred_to_gt_x100 < 2.0 * delta_x100);
    CHECK(rows[0].gt_to_pred_x100 < 4.0 * delta_x100);
    CHECK(rows[0].points > 0.0);
    CHECK(fs::exists(kWork / "ev_gt" / "config.resolved.json"));
    CHECK(fs::exists(kWork / "ev_gt" / "per_object.csv"));

    CHECK(cli("eval --checkpoint nowhere --data ds --out ev_bad").code == 2);
    CHECK(cli("eval --data ds --out ev_bad").code == 1);
    CHECK(cli("eval --gt-as-prediction --data ds --split nope --out ev_bad").code == 1);
}

TEST_CASE("train: streams loss lines, writes echo, log and checkpoints; eval reads them") {
    ensure_dataset();
    const auto r = cli("train --config cfg.json --out run_stream");
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("phase 1 epoch 0 step 1 loss") != std::string::npos);
    CHECK(r.out.find("phase 2 epoch 0") != std::string::npos);
    const auto echo = read_json(kWork / "run_stream" / "config.resolved.json");
    CHECK(echo.at("model").at("scale_preset") == "desk");
    CHECK(echo.at("train").at("phase1_epochs") == 2);
    CHECK(echo.at("train").at("render_upsample") == 3);
    CHECK(fs::exists(kWork / "run_stream" / "train_log.jsonl"));
    CHECK(fs::is_directory(kWork / "run_stream" / "checkpoints" / "p2-e0001"));

    const auto e = cli("eval --checkpoint run_stream/checkpoints/p2-e0001 --data ds --split all --out ev_run");
    INFO(e.err);
    REQUIRE(e.code == 0);
    std::ifstream f(kWork / "ev_run" / "report.csv");
    const auto rows = read_report_csv(f);
    REQUIRE(rows.size() == 1u);
    CHECK(rows[0].method == "generator");
    CHECK(rows[0].phase == "phase2");
}

TEST_CASE("train: deterministic reruns and --resume reproduce artifacts bitwise") {
    ensure_trained();
    REQUIRE(cli("train --config cfg.json --out run_b --quiet", "PCGEN_DETERMINISTIC=1").code == 0);
    check_trees_equal(kWork / "run", kWork / "run_b", {"wall_time.json", "config.resolved.json"});

    // Resume from the first phase-1 checkpoint of a copy of the run.
    fs::remove_all(kWork / "run_c");
    fs::create_directories(kWork / "run_c" / "checkpoints");
    fs::copy(kWork / "run" / "checkpoints" / "p1-e0001", kWork / "run_c" / "checkpoints" / "p1-e0001",
             fs::copy_options::recursive);
    fs::copy_file(kWork / "run" / "train_log.jsonl", kWork / "run_c" / "train_log.jsonl");
    const auto r = cli("train --config cfg.json --out run_c --quiet --resume run_c/checkpoints/p1-e0001",
                       "PCGEN_DETERMINISTIC=1");
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("resumed from") != std::string::npos);
    CHECK(slurp(kWork / "run" / "train_log.jsonl") == slurp(kWork / "run_c" / "train_log.jsonl"));
    for (const auto* ck : {"p1-e0002", "p2-e0001"}) check_trees_equal(kWork / "run" / "checkpoints" / ck, kWork / "run_c" / "checkpoints" / ck, {});

    const auto e1 = cli("eval --checkpoint run/checkpoints/p2-e0001 --data ds --out ev_d1", "PCGEN_DETERMINISTIC=1");
    const auto e2 = cli("eval --checkpoint run_c/checkpoints/p2-e0001 --data ds --out ev_d2", "PCGEN_DETERMINISTIC=1");
    REQUIRE(e1.code == 0);
    REQUIRE(e2.code == 0);
    CHECK(slurp(kWork / "ev_d1" / "report.csv") == slurp(kWork / "ev_d2" / "report.csv"));
}

TEST_CASE("render: PLY vertex count matches the generated points; previews decode") {
    ensure_trained();
    const fs::path ck = kWork / "run" / "checkpoints" / "p2-e0001";
    const auto r = cli("render --checkpoint run/checkpoints/p2-e0001 --object-id obj0005 --data ds --out rend");
    INFO(r.err);
    REQUIRE(r.code == 0);

    auto model = Generator::load(ck);
    const auto data = load_dataset(kWork / "ds", 0);
    std::size_t idx = 0;
    while (data.objects[idx].id != "obj0005") ++idx;
    GeneratorOutput out;
    {
        NoGradGuard ng;
        out = model.generate(load_sample(data, idx).rgb);
    }
    const auto views = out.to_views();
    const auto n = count_generated_points(views, 0.5f);
    const auto ply = read_ply(kWork / "rend" / "cloud.ply");
    CHECK(ply.size() == n);
    CHECK(n > 0u);
    const auto expect = backproject(views, make_fixed_views(data.views).fixed_views, 0.5f);
    for (std::size_t i = 0; i < expect.xyz.size(); ++i) REQUIRE(ply.xyz[i] == expect.xyz[i]);

    const auto side = read_json(kWork / "rend" / "depth_png.json");
    const double scale = side.at("scale").get<double>();
    CHECK(side.at("files").size() == 8u);
    for (std::size_t v = 0; v < 8; ++v) {
        const auto png = read_gray16_png(kWork / "rend" / ("view" + std::to_string(v) + "_depth.png"));
        REQUIRE(png.width == 32);
        REQUIRE(png.height == 32);
        for (std::size_t i = 0; i < png.pixels.size(); ++i) {
            if (views[v].mask[i] >= 0.5f) REQUIRE(std::abs(png.pixels[i] / scale - views[v].depth[i]) <= 0.5 / scale + 1e-6);
            else REQUIRE(png.pixels[i] == 0);
        }
    }
    CHECK(tnsr::load(kWork / "rend" / "depth.tnsr").shape() == Shape{8, 32, 32});
    CHECK(read_json(kWork / "rend" / "config.resolved.json").at("points") == n);

    // A TNSR input image works the same way.
    tnsr::save(kWork / "input.tnsr", load_sample(data, idx).rgb);
    const auto r2 = cli("render --checkpoint run/checkpoints/p2-e0001 --input-image input.tnsr --out rend2");
    REQUIRE(r2.code == 0);
    CHECK(slurp(kWork / "rend" / "cloud.ply") == slurp(kWork / "rend2" / "cloud.ply"));
    // ... and a PNG.
    write_rgb_png(kWork / "input.png", load_sample(data, idx).rgb);
    CHECK(cli("render --checkpoint run/checkpoints/p2-e0001 --input-image input.png --out rend3").code == 0);

    CHECK(cli("render --checkpoint run/checkpoints/p2-e0001 --out rend4").code == 1);
    CHECK(cli("render --checkpoint run/checkpoints/p2-e0001 --input-image missing.png --out rend4").code == 2);
    CHECK(cli("render --checkpoint run/checkpoints/p2-e0001 --object-id nope --data ds --out rend4").code == 2);
}

TEST_CASE("render: empty prediction writes a 0-vertex PLY and exits with the warning code") {
    ensure_dataset();
    Generator g(ModelConfig::desk(), 3);
    // Mask logits come from head channels [r^2, 2 r^2) after the pixel shuffle.
    const auto r2 = g.config().shuffle() * g.config().shuffle();
    auto b = g.param("head.b").value.mutable_data();
    for (std::int64_t c = r2; c < 2 * r2; ++c) b[static_cast<std::size_t>(c)] = -100.0f;
    g.save(kWork / "empty_model");
    const auto r = cli("render --checkpoint empty_model --object-id obj0000 --data ds --out rend_empty");
    CHECK(r.code == 4);
    CHECK(r.err.find("empty prediction") != std::string::npos);
    CHECK(read_ply(kWork / "rend_empty" / "cloud.ply").size() == 0u);
    CHECK(slurp(kWork / "rend_empty" / "cloud.ply").find("element vertex 0\n") != std::string::npos);
}

TEST_CASE("PLY header matches the golden ASCII layout") {
    fs::create_directories(kWork);
    PointCloud pc{{0.5f, -0.25f, 1.0f, 0.0f, 0.125f, -2.0f}};
    write_ply(kWork / "golden.ply", pc);
    CHECK(slurp(kWork / "golden.ply") ==
          "ply\nformat ascii 1.0\ncomment pcgen point cloud\nelement vertex 2\n"
          "property float x\nproperty float y\nproperty float z\nend_header\n"
          "0.5 -0.25 1\n0 0.125 -2\n");
    CHECK(read_ply(kWork / "golden.ply").xyz == pc.xyz);
    std::ofstream(kWork / "bad.ply") << "ply\nformat binary_little_endian 1.0\nend_header\n";
    CHECK_THROWS_AS(read_ply(kWork / "bad.ply"), ExportError);
}

TEST_CASE("gradcheck: single-op table, corruption detected, bad arguments rejected") {
    auto r = cli("gradcheck --preset desk --ops matmul --out gc");
    CHECK(r.code == 0);
    std::istringstream lines(r.out);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line)) rows += line.rfind("matmul", 0) == 0;
    CHECK(rows == 1);
    CHECK(r.out.find("PASS") != std::string::npos);
    std::ifstream csv(kWork / "gc" / "gradcheck.csv");
    int csv_lines = 0;
    while (std::getline(csv, line)) ++csv_lines;
    CHECK(csv_lines == 2);

    r = cli("gradcheck --ops matmul,softmax --corrupt-op matmul:1.1");
    CHECK(r.code == 3);
    CHECK(r.out.find("FAIL") != std::string::npos);
    CHECK(r.out.find("1/2 passed") != std::string::npos);

    CHECK(cli("gradcheck --ops no_such_op").code == 1);
    CHECK(cli("gradcheck --preset full").code == 1);
}

TEST_CASE("gradcheck: whole suite passes") {
    const auto r = cli("gradcheck --preset desk --ops all");
    INFO(r.out);
    CHECK(r.code == 0);
    CHECK(r.out.find("FAIL") == std::string::npos);
    CHECK(r.out.find("model_e2e") != std::string::npos);
}
