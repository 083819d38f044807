// pcgen: synth | train | eval | render | gradcheck.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure,
// 4 completed with a warning (e.g. an empty prediction).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcgen/data.hpp"
#include "pcgen/export.hpp"
#include "pcgen/gradsuite.hpp"
#include "pcgen/kernels.hpp"
#include "pcgen/metrics.hpp"
#include "pcgen/model.hpp"
#include "pcgen/tnsr.hpp"
#include "pcgen/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pcgen;

namespace {

constexpr int kOk = 0, kUsage = 1, kDataError = 2, kNumeric = 3, kWarning = 4;

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

bool g_deterministic = false;

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config " + path.string());
    const auto j = json::parse(f, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("config " + path.string() + " is not a JSON object");
    return j;
}

// {model, train, data{root}} with everything optional; data.root is relative
// to the config file.
struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    TrainConfig train = TrainConfig::desk();
    fs::path data_root;
};

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) return rc;
    const auto j = read_json_file(path);
    for (const auto& [k, v] : j.items())
        if (k != "model" && k != "train" && k != "data") throw ConfigError("config: unknown field '" + k + "' (allowed: model, train, data)");
    json mj = j.value("model", json::object());
    if (!mj.is_object()) throw ConfigError("config: model must be an object");
    if (!mj.contains("scale_preset")) mj["scale_preset"] = "desk";
    rc.model = ModelConfig::from_json(mj);
    rc.model.validate();
    const auto base = rc.model.scale_preset == "desk" ? TrainConfig::desk() : TrainConfig::full();
    rc.train = TrainConfig::from_json(j.value("train", json::object()), base);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (!d.is_object()) throw ConfigError("config: data must be an object");
        for (const auto& [k, v] : d.items())
            if (k != "root") throw ConfigError("config: unknown field 'data." + k + "' (allowed: root)");
        if (d.contains("root")) {
            if (!d.at("root").is_string()) throw ConfigError("config: data.root must be a string path");
            fs::path r = d.at("root").get<std::string>();
            rc.data_root = r.is_absolute() ? r : fs::path(path).parent_path() / r;
        }
    }
    return rc;
}

DatasetManifest load_data(const fs::path& root, std::uint64_t split_seed) {
    auto m = load_dataset(root, split_seed);
    for (const auto& [id, why] : m.corrupt) std::cerr << "warning: skipping corrupt object " << id << ": " << why << '\n';
    return m;
}

json common_echo(const std::string& command) {
    return {{"command", command}, {"deterministic", g_deterministic}, {"threads", kernels::thread_count()}};
}

// --- synth ----------------------------------------------------------------------------

struct SynthArgs {
    std::size_t count = 0;
    std::string kinds = "cube,box_stack,chair_proxy,sphere";
    std::uint64_t seed = 0;
    std::string out;
    int size = 32;
    std::size_t points = 10000;
};

int cmd_synth(const SynthArgs& a) {
    std::vector<ShapeKind> kinds;
    for (const auto& k : split_list(a.kinds)) {
        try {
            kinds.push_back(parse_shape_kind(k));
        } catch (const std::invalid_argument&) {
            throw UsageError("--kinds: unknown kind '" + k + "' (allowed: cube, box_stack, chair_proxy, sphere)");
        }
    }
    if (kinds.empty()) throw UsageError("--kinds: empty list");
    if (a.size < 8 || a.size > 1024) throw UsageError("--size must be in [8, 1024]");
    if (a.points < 1) throw UsageError("--points must be >= 1");

    const fs::path root = a.out;
    ensure_dir(root);
    SynthConfig cfg;
    cfg.views.image_size = a.size;
    cfg.cloud_points = a.points;

    std::vector<ObjectEntry> entries;
    std::map<std::string, int> per_kind;
    for (std::size_t i = 0; i < a.count; ++i) {
        const auto kind = kinds[i % kinds.size()];
        // Per-object seed: a pure function of (--seed, index).
        std::seed_seq sq{static_cast<std::uint32_t>(a.seed), static_cast<std::uint32_t>(a.seed >> 32),
                         static_cast<std::uint32_t>(i)};
        std::uint32_t w[2];
        sq.generate(w, w + 2);
        auto s = synth_object(kind, (std::uint64_t{w[0]} << 32) | w[1], cfg);
        char id[32];
        std::snprintf(id, sizeof id, "obj%04zu", i);
        s.object_id = id;
        write_sample(root, s);
        entries.push_back({s.object_id, s.category, s.input_azimuth_deg, s.input_elevation_deg});
        ++per_kind[s.category];
    }
    write_manifest(root, a.size, cfg.views, entries);

    auto echo = common_echo("synth");
    echo["synth"] = {{"count", a.count}, {"kinds", split_list(a.kinds)}, {"seed", a.seed},
                     {"size", a.size},   {"points", a.points},          {"out", root.string()}};
    write_json(root / "synth.resolved.json", echo);

    std::cout << "dataset " << root.string() << ": " << a.count << " objects, " << a.size << "x" << a.size
              << " views, " << a.points << " cloud points\n";
    for (const auto& [k, n] : per_kind) std::cout << "  " << k << ": " << n << '\n';
    if (a.count == 0) {
        std::cerr << "warning: --count 0 wrote an empty manifest\n";
        return kOk;
    }
    return kOk;
}

// --- train ----------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string phase = "both";
    std::string resume;
    std::string out;
    std::string data;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    auto rc = load_run_config(a.config);
    if (!a.data.empty()) rc.data_root = a.data;
    if (a.seed) rc.train.seed = *a.seed;
    rc.train.validate();
    if (rc.data_root.empty()) throw UsageError("no dataset: pass --data or set data.root in --config");
    if (a.phase == "2" && a.resume.empty())
        throw UsageError("--phase 2 needs a phase-1 checkpoint: pass --resume <checkpoint dir> or --resume latest");

    const fs::path out = a.out;
    ensure_dir(out);
    const auto data = load_data(rc.data_root, rc.train.split_seed);

    auto echo = common_echo("train");
    echo["model"] = rc.model.to_json();
    echo["train"] = rc.train.to_json();
    echo["data"] = {{"root", rc.data_root.string()}, {"objects", data.objects.size()}, {"corrupt", data.corrupt.size()}};
    echo["phase"] = a.phase;
    echo["resume"] = a.resume;
    write_json(out / "config.resolved.json", echo);

    Generator model(rc.model, rc.train.seed);
    Trainer trainer(model, data, data.train, rc.train, out);
    if (!a.quiet) trainer.set_echo(&std::cout);
    if (!a.resume.empty()) {
        fs::path ck = a.resume;
        if (a.resume == "latest") {
            const auto latest = trainer.latest_checkpoint();
            if (!latest) throw DataError("--resume latest: no checkpoint under " + (out / "checkpoints").string());
            ck = *latest;
        }
        if (!fs::is_directory(ck)) throw DataError("--resume: checkpoint " + ck.string() + " not found");
        trainer.resume(ck);
        std::cout << "resumed from " << ck.string() << " (phase " << trainer.phase() << ", epoch "
                  << trainer.epochs_done() << ", step " << trainer.global_step() << ")\n";
    }

    std::vector<TrainLog> logs;
    if (a.phase == "1" || a.phase == "both") logs.push_back(trainer.run_phase(1));
    if (a.phase == "2" || a.phase == "both") logs.push_back(trainer.run_phase(2));

    std::size_t warnings = 0;
    for (const auto& l : logs)
        for (const auto& s : l.steps) warnings += s.warnings.size();
    std::cout << "done: step " << trainer.global_step() << ", phase " << trainer.phase() << ", epochs "
              << trainer.epochs_done();
    if (const auto latest = trainer.latest_checkpoint()) std::cout << ", checkpoint " << latest->string();
    std::cout << '\n';
    if (warnings) std::cout << warnings << " step warnings (see train_log.jsonl)\n";
    return kOk;
}

// --- eval -----------------------------------------------------------------------------

struct EvalArgs {
    std::string config;
    std::string checkpoint;
    std::string split = "test";
    std::string data;
    std::string out;
    std::string method;
    std::string phase;
    bool gt_as_prediction = false;
    std::optional<std::uint64_t> seed;
    std::optional<float> threshold;
};

std::string checkpoint_phase(const LoadedCheckpoint& ck) {
    if (ck.meta.contains("progress")) return "phase" + std::to_string(ck.meta.at("progress").at("phase").get<int>());
    return "final";
}

void print_table(std::ostream& os, const EvalResult& r, const std::string& split) {
    os << std::left << std::setw(14) << "method" << std::setw(10) << "phase" << std::right << std::setw(12)
       << "Pred->GT" << std::setw(12) << "GT->Pred" << std::setw(12) << "points" << std::setw(10) << "objects" << '\n';
    os << std::left << std::setw(14) << r.row.method << std::setw(10) << r.row.phase << std::right << std::fixed
       << std::setprecision(3) << std::setw(12) << r.row.pred_to_gt_x100 << std::setw(12) << r.row.gt_to_pred_x100
       << std::setprecision(1) << std::setw(12) << r.row.points << std::setw(10) << r.objects.size() << '\n';
    os << std::defaultfloat << "split " << split << ": " << r.included << " scored, " << r.flagged
       << " flagged (empty prediction, excluded from errors)\n";
}

int cmd_eval(const EvalArgs& a) {
    auto rc = load_run_config(a.config);
    if (!a.data.empty()) rc.data_root = a.data;
    if (a.seed) rc.train.split_seed = *a.seed;
    if (a.threshold) rc.train.mask_threshold = *a.threshold;
    if (rc.data_root.empty()) throw UsageError("no dataset: pass --data or set data.root in --config");
    if (a.gt_as_prediction == !a.checkpoint.empty())
        throw UsageError("pass exactly one of --checkpoint or --gt-as-prediction");
    Split split;
    try {
        split = parse_split(a.split);
    } catch (const std::invalid_argument&) {
        throw UsageError("--split must be train, val, test or all");
    }
    const fs::path out = a.out;
    ensure_dir(out);
    const auto data = load_data(rc.data_root, rc.train.split_seed);
    const auto indices = split == Split::all ? data.all_indices() : data.indices(split);
    const float th = rc.train.mask_threshold;

    auto echo = common_echo("eval");
    echo["data"] = {{"root", rc.data_root.string()}, {"split", a.split}, {"split_seed", rc.train.split_seed},
                    {"objects", indices.size()}, {"corrupt", data.corrupt.size()}};
    echo["mask_threshold"] = th;

    EvalResult r;
    if (a.gt_as_prediction) {
        std::vector<std::string> ids;
        std::vector<std::vector<DepthMaskView>> preds;
        std::vector<PointCloud> gts;
        for (auto i : indices) {
            auto s = load_sample(data, i);
            ids.push_back(s.object_id);
            preds.push_back(s.gt_views_fixed);
            gts.push_back(s.gt_cloud);
        }
        r = evaluate_predictions(ids, preds, gts, data.views, th, a.method.empty() ? "gt" : a.method,
                                 a.phase.empty() ? "fixture" : a.phase);
        echo["predictor"] = "gt";
    } else {
        if (!fs::is_directory(a.checkpoint)) throw DataError("--checkpoint: " + a.checkpoint + " not found");
        const auto ck = read_checkpoint(a.checkpoint);
        auto model = Generator::load(a.checkpoint);
        if (model.config().out_size != data.image_size)
            throw DataError("checkpoint predicts " + std::to_string(model.config().out_size) + "px views but the dataset has " +
                            std::to_string(data.image_size) + "px views");
        r = evaluate(model, data, indices, th, a.method.empty() ? "generator" : a.method,
                     a.phase.empty() ? checkpoint_phase(ck) : a.phase);
        echo["predictor"] = "checkpoint";
        echo["checkpoint"] = a.checkpoint;
        echo["model"] = model.config().to_json();
    }
    write_json(out / "config.resolved.json", echo);

    {
        std::ofstream f(out / "report.csv");
        if (!f) throw DataError("cannot write " + (out / "report.csv").string());
        write_report_csv(f, {r.row});
    }
    {
        std::ofstream f(out / "per_object.csv");
        f << "object_id,pred_to_gt_x100,gt_to_pred_x100,points,empty\n";
        f << std::setprecision(9);
        for (const auto& o : r.objects)
            f << o.object_id << ',' << o.pred_to_gt_x100 << ',' << o.gt_to_pred_x100 << ',' << o.points << ','
              << (o.empty ? 1 : 0) << '\n';
    }
    print_table(std::cout, r, a.split);
    if (r.objects.empty()) {
        std::cerr << "warning: split '" << a.split << "' has no objects\n";
        return kWarning;
    }
    if (r.included == 0) {
        std::cerr << "warning: every prediction was empty; error columns are NaN\n";
        return kWarning;
    }
    return kOk;
}

// --- render ---------------------------------------------------------------------------

struct RenderArgs {
    std::string checkpoint;
    std::string input_image;
    std::string object_id;
    std::string config;
    std::string data;
    std::string out;
    float threshold = 0.5f;
    double png_scale = 1000.0;
};

int cmd_render(const RenderArgs& a) {
    if (a.input_image.empty() == a.object_id.empty()) throw UsageError("pass exactly one of --input-image or --object-id");
    if (!(a.threshold >= 0.0f && a.threshold <= 1.0f)) throw UsageError("--threshold must be in [0, 1]");
    if (!(a.png_scale > 0.0)) throw UsageError("--png-scale must be > 0");
    if (!fs::is_directory(a.checkpoint)) throw DataError("--checkpoint: " + a.checkpoint + " not found");
    auto model = Generator::load(a.checkpoint);
    const auto S = model.config().out_size;

    Tensor image;
    ViewConfig views;
    views.image_size = static_cast<int>(S);
    std::string source;
    if (!a.input_image.empty()) {
        const fs::path p = a.input_image;
        if (!fs::is_regular_file(p)) throw DataError("--input-image: " + p.string() + " not found");
        if (p.extension() == ".tnsr") image = tnsr::load(p);
        else image = read_rgb_png(p);
        if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
            throw DataError("--input-image: expected a square RGB image, got " + shape_str(image.shape()));
        source = p.string();
    } else {
        auto rc = load_run_config(a.config);
        if (!a.data.empty()) rc.data_root = a.data;
        if (rc.data_root.empty()) throw UsageError("--object-id needs --data or data.root in --config");
        const auto data = load_data(rc.data_root, rc.train.split_seed);
        std::size_t idx = data.objects.size();
        for (std::size_t i = 0; i < data.objects.size(); ++i)
            if (data.objects[i].id == a.object_id) idx = i;
        if (idx == data.objects.size()) throw DataError("--object-id: no valid object '" + a.object_id + "' in " + rc.data_root.string());
        if (data.image_size != S)
            throw DataError("checkpoint predicts " + std::to_string(S) + "px views but the dataset has " +
                            std::to_string(data.image_size) + "px views");
        image = load_sample(data, idx).rgb;
        views = data.views;
        source = "object " + a.object_id;
    }

    GeneratorOutput out;
    {
        NoGradGuard ng;
        out = model.generate(image);
    }
    const auto dm = out.to_views();
    const auto poses = make_fixed_views(views).fixed_views;
    const auto cloud = backproject(dm, poses, a.threshold);
    const auto counted = count_generated_points(dm, a.threshold);

    const fs::path dir = a.out;
    ensure_dir(dir);
    write_ply(dir / "cloud.ply", cloud);
    tnsr::save(dir / "depth.tnsr", out.depth());
    tnsr::save(dir / "mask.tnsr", Tensor::from_data({out.depth().dim(0), S, S}, out.mask_prob()));
    DepthPngEncoding enc;
    enc.scale = a.png_scale;
    enc.threshold = a.threshold;
    json previews = json::array();
    for (std::size_t v = 0; v < dm.size(); ++v) {
        const auto name = "view" + std::to_string(v) + "_depth.png";
        write_depth_png(dir / name, dm[v], enc);
        previews.push_back(name);
    }
    auto side = enc.to_json();
    side["files"] = previews;
    write_json(dir / "depth_png.json", side);

    auto echo = common_echo("render");
    echo["checkpoint"] = a.checkpoint;
    echo["source"] = source;
    echo["threshold"] = a.threshold;
    echo["png_scale"] = a.png_scale;
    echo["model"] = model.config().to_json();
    echo["points"] = cloud.size();
    write_json(dir / "config.resolved.json", echo);

    std::cout << "rendered " << source << ": " << cloud.size() << " points -> " << (dir / "cloud.ply").string() << ", "
              << dm.size() << " depth previews\n";
    if (cloud.size() != counted) {
        std::cerr << "error: PLY has " << cloud.size() << " vertices but " << counted << " pixels are lit\n";
        return kNumeric;
    }
    if (cloud.empty()) {
        std::cerr << "warning: empty prediction (no pixel reached mask threshold " << a.threshold << "); wrote a 0-vertex PLY\n";
        return kWarning;
    }
    return kOk;
}

// --- gradcheck ------------------------------------------------------------------------

struct GradArgs {
    std::string preset = "desk";
    std::string ops = "all";
    std::string corrupt;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradArgs& a) {
    if (a.preset != "desk") throw UsageError("--preset: only 'desk' is supported (the full preset is too large for finite differences)");
    const auto known = gradcheck_case_names();
    std::vector<std::string> names;
    if (a.ops != "all") {
        names = split_list(a.ops);
        if (names.empty()) throw UsageError("--ops: empty list");
        for (const auto& n : names)
            if (std::find(known.begin(), known.end(), n) == known.end())
                throw UsageError("--ops: unknown case '" + n + "'; run with --list to see the cases");
    }
    if (!a.corrupt.empty()) {
        // Test hook: OP[:FACTOR] scales that op's backward by FACTOR.
        const auto colon = a.corrupt.find(':');
        const auto op = a.corrupt.substr(0, colon);
        float factor = 1.5f;
        if (colon != std::string::npos) {
            try {
                factor = std::stof(a.corrupt.substr(colon + 1));
            } catch (const std::exception&) {
                throw UsageError("--corrupt-op: bad factor in '" + a.corrupt + "'");
            }
        }
        Tape::current().set_corruption(op, factor);
        std::cerr << "warning: gradient of '" << op << "' corrupted by x" << factor << " (test hook)\n";
    }
    const auto results = run_gradcheck_suite(names, a.seed);
    Tape::current().clear_corruption();

    std::size_t failed = 0;
    double total = 0.0;
    std::cout << std::left << std::setw(20) << "case" << std::right << std::setw(14) << "max_rel_err" << std::setw(10)
              << "tol" << std::setw(8) << "coords" << std::setw(10) << "seconds" << "  result\n";
    for (const auto& r : results) {
        std::cout << std::left << std::setw(20) << r.name << std::right << std::scientific << std::setprecision(3)
                  << std::setw(14) << r.max_rel_error << std::setprecision(0) << std::setw(10) << r.tolerance
                  << std::defaultfloat << std::setw(8) << r.coords << std::fixed << std::setprecision(3) << std::setw(10)
                  << r.seconds << std::defaultfloat << "  " << (r.passed ? "PASS" : "FAIL") << '\n';
        failed += r.passed ? 0 : 1;
        total += r.seconds;
    }
    std::cout << results.size() - failed << "/" << results.size() << " passed in " << std::fixed << std::setprecision(2)
              << total << " s\n"
              << std::defaultfloat;

    if (!a.out.empty()) {
        const fs::path dir = a.out;
        ensure_dir(dir);
        std::ofstream f(dir / "gradcheck.csv");
        f << "case,max_rel_error,tolerance,coords,seconds,passed\n" << std::setprecision(9);
        for (const auto& r : results)
            f << r.name << ',' << r.max_rel_error << ',' << r.tolerance << ',' << r.coords << ',' << r.seconds << ','
              << (r.passed ? 1 : 0) << '\n';
        auto echo = common_echo("gradcheck");
        echo["preset"] = a.preset;
        echo["ops"] = a.ops;
        echo["seed"] = a.seed;
        echo["corrupt_op"] = a.corrupt;
        write_json(dir / "config.resolved.json", echo);
    }
    return failed ? kNumeric : kOk;
}

}  // namespace

int main(int argc, char** argv) {
    g_deterministic = kernels::apply_determinism_from_env();

    CLI::App app{"pcgen: single-image point cloud generation (8 depth/mask views -> fused cloud)"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure, 4 completed with a warning.\n"
               "PCGEN_DETERMINISTIC=1 forces single-threaded kernels.");

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--count", sa.count, "Number of objects")->required();
    synth->add_option("--kinds", sa.kinds, "Comma-separated shape kinds, cycled")->capture_default_str();
    synth->add_option("--seed", sa.seed, "Seed")->capture_default_str();
    synth->add_option("--out", sa.out, "Dataset root")->required();
    synth->add_option("--size", sa.size, "View and image size in pixels")->capture_default_str();
    synth->add_option("--points", sa.points, "GT cloud points per object")->capture_default_str();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train the generator (phase 1 maps, phase 2 pseudo-rendering)");
    train->add_option("--config", ta.config, "JSON config {model, train, data{root}}");
    train->add_option("--phase", ta.phase, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}))->capture_default_str();
    train->add_option("--resume", ta.resume, "Checkpoint directory or 'latest'");
    train->add_option("--out", ta.out, "Run directory (log, checkpoints)")->required();
    train->add_option("--data", ta.data, "Dataset root (overrides data.root)");
    train->add_option("--seed", ta.seed, "Overrides train.seed");
    train->add_flag("--quiet", ta.quiet, "No per-step lines");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Score a checkpoint: Pred->GT / GT->Pred x100 and point counts");
    eval->add_option("--config", ea.config, "JSON config (data.root, train.split_seed, train.mask_threshold)");
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory");
    eval->add_flag("--gt-as-prediction", ea.gt_as_prediction, "Score the GT views themselves (fixture)");
    eval->add_option("--split", ea.split, "train, val, test or all")->capture_default_str();
    eval->add_option("--data", ea.data, "Dataset root (overrides data.root)");
    eval->add_option("--out", ea.out, "Output directory for report.csv")->required();
    eval->add_option("--method", ea.method, "Method column");
    eval->add_option("--phase", ea.phase, "Phase column (default from the checkpoint)");
    eval->add_option("--seed", ea.seed, "Split seed (overrides train.split_seed)");
    eval->add_option("--threshold", ea.threshold, "Mask threshold");

    RenderArgs ra;
    auto* render = app.add_subcommand("render", "Generate one cloud: PLY + 16-bit PNG depth previews");
    render->add_option("--checkpoint", ra.checkpoint, "Checkpoint directory")->required();
    render->add_option("--input-image", ra.input_image, "PNG or TNSR [3,H,W] image");
    render->add_option("--object-id", ra.object_id, "Dataset object id");
    render->add_option("--config", ra.config, "JSON config (data.root)");
    render->add_option("--data", ra.data, "Dataset root");
    render->add_option("--out", ra.out, "Output directory")->required();
    render->add_option("--threshold", ra.threshold, "Mask threshold")->capture_default_str();
    render->add_option("--png-scale", ra.png_scale, "PNG value per world unit of depth")->capture_default_str();

    GradArgs ga;
    bool list_cases = false;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    grad->add_option("--preset", ga.preset, "Model preset for the end-to-end case")->capture_default_str();
    grad->add_option("--ops", ga.ops, "'all' or a comma-separated list of cases")->capture_default_str();
    grad->add_option("--corrupt-op", ga.corrupt, "Test hook: OP[:FACTOR] scales that op's gradient");
    grad->add_option("--out", ga.out, "Optional directory for gradcheck.csv");
    grad->add_option("--seed", ga.seed, "Seed for the random inputs")->capture_default_str();
    grad->add_flag("--list", list_cases, "List the cases and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) return cmd_synth(sa);
        if (*train) return cmd_train(ta);
        if (*eval) return cmd_eval(ea);
        if (*render) return cmd_render(ra);
        if (*grad) {
            if (list_cases) {
                for (const auto& n : gradcheck_case_names()) std::cout << n << '\n';
                return kOk;
            }
            return cmd_gradcheck(ga);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kDataError;
    } catch (const tnsr::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kDataError;
    } catch (const ExportError& e) {
        std::cerr << "export error: " << e.what() << '\n';
        return kDataError;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::logic_error& e) {
        std::cerr << "invariant failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kUsage;
}
