#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgc/bench.hpp"
#include "pgc/io.hpp"
#include "pgc/penet.hpp"
#include "pgc/pgc_net.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct DictFlags {
    int k = 7;
    double sigma_min = 0.25, sigma_max = 1.75, sigma_step = 0.05;
    std::string normalization = "unit_sum";
    double energy_threshold = 0.999;

    pgc::DictionaryConfig to_config() const {
        if (k < 1 || k % 2 == 0) throw std::invalid_argument("--k must be odd and >= 1");
        pgc::DictionaryConfig cfg;
        cfg.kernel_size = k;
        cfg.sigma_min = sigma_min;
        cfg.sigma_max = sigma_max;
        cfg.sigma_step = sigma_step;
        if (normalization == "unit_sum") cfg.mode = pgc::NormalizationMode::UnitSum;
        else if (normalization == "paper_eq4") cfg.mode = pgc::NormalizationMode::PaperEq4;
        else throw std::invalid_argument("--normalization must be unit_sum or paper_eq4");
        cfg.energy_threshold = energy_threshold;
        return cfg;
    }
};

void add_dict_flags(CLI::App* app, DictFlags& f) {
    app->add_option("--k", f.k, "kernel size (odd)");
    app->add_option("--sigma-min", f.sigma_min, "grid minimum sigma");
    app->add_option("--sigma-max", f.sigma_max, "grid maximum sigma");
    app->add_option("--sigma-step", f.sigma_step, "grid step");
    app->add_option("--normalization", f.normalization, "unit_sum | paper_eq4");
    app->add_option("--energy-threshold", f.energy_threshold, "retained-energy threshold");
}

int parse_threads_env() {
    const char* env = std::getenv("PGC_THREADS");
    if (!env) return 0;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 0)
        throw std::invalid_argument("PGC_THREADS must be a nonnegative integer");
    return int(v);  // 0 = auto; the reference implementation runs single-threaded
}

std::vector<pgc::Scene> load_or_synth_scenes(const std::string& data_dir, int synth_scenes,
                                             int height, int width, int count,
                                             std::uint64_t seed) {
    std::vector<pgc::Scene> scenes;
    if (!data_dir.empty()) {
        std::vector<fs::path> dirs;
        for (const fs::directory_entry& e : fs::directory_iterator(data_dir))
            if (e.is_directory()) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const fs::path& d : dirs) scenes.push_back(pgc::load_scene(d));
        if (scenes.empty()) throw pgc::io_error("no scene directories in " + data_dir);
    } else {
        for (int i = 0; i < synth_scenes; ++i)
            scenes.push_back(pgc::synth_scene(height, width, count, seed + std::uint64_t(i)));
    }
    return scenes;
}

pgc::TrainerConfig trainer_from_json(const json& j) {
    pgc::TrainerConfig t;
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.momentum = j.value("momentum", t.momentum);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.epochs = j.value("epochs", t.epochs);
    t.seed = j.value("seed", t.seed);
    return t;
}

std::vector<double> read_count_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw pgc::io_error("cannot open: " + path.string());
    std::vector<double> vals;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        try {
            vals.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw pgc::io_error("malformed count line in " + path.string() + ": " + line);
        }
    }
    if (vals.empty()) throw pgc::io_error("no counts in " + path.string());
    return vals;
}

int cmd_dict(const DictFlags& flags, const std::string& out) {
    pgc::KernelDictionary dict = pgc::build_dictionary(flags.to_config());
    json j;
    j["grid_size"] = dict.grid_size();
    j["retained_count"] = dict.retained_count;
    j["energy_ratio"] = dict.energy_ratio;
    j["config"] = pgc::dictionary_config_json(dict.config);
    if (!out.empty()) pgc::save_dictionary(out, dict);
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_filter(const std::string& input, const std::string& perspective, const std::string& out,
               const std::string& mode, const std::string& padding, const DictFlags& flags,
               const std::string& dict_dir, double alpha, double beta, double a, double p0) {
    pgc::Tensorf x = pgc::load_tensor(input);
    pgc::Mapf p = pgc::load_map(perspective);
    if (p.height != x.height || p.width != x.width)
        throw pgc::io_error("perspective map shape does not match the input tensor");

    pgc::KernelDictionary dict = dict_dir.empty() ? pgc::build_dictionary(flags.to_config())
                                                  : pgc::load_dictionary(dict_dir);
    pgc::PerspectiveParams<float> params;
    params.alpha = float(alpha);
    params.beta = float(beta);
    params.a = float(a);
    params.p0 = float(p0);
    pgc::Mapf sigma = pgc::blur_from_perspective(pgc::normalize_perspective(p, params), params);

    pgc::PaddingMode pad;
    if (padding == "replicate") pad = pgc::PaddingMode::Replicate;
    else if (padding == "zero") pad = pgc::PaddingMode::Zero;
    else throw std::invalid_argument("--padding must be replicate or zero");

    pgc::Tensorf y;
    if (mode == "exact")
        y = pgc::filter_exact(x, sigma, dict.config.kernel_size, dict.config.mode, pad);
    else if (mode == "approx")
        y = pgc::filter_approx(x, sigma, dict, pad);
    else
        throw std::invalid_argument("--mode must be exact or approx");

    if (pgc::has_nan(y.v)) {
        std::cerr << "numerical failure: NaN in filtered output\n";
        return kExitNumerical;
    }
    pgc::save_tensor(out, y);
    return kExitOk;
}

int cmd_bench(int channels, int height, int width, int reps, std::uint64_t seed,
              const DictFlags& flags, const std::string& dict_dir, const std::string& out,
              const std::string& csv) {
    pgc::KernelDictionary dict = dict_dir.empty() ? pgc::build_dictionary(flags.to_config())
                                                  : pgc::load_dictionary(dict_dir);
    pgc::BenchReport rep = pgc::bench_filter(channels, height, width, dict, reps, seed);
    json j = pgc::bench_report_json(rep);
    if (!out.empty()) pgc::write_json(out, j);
    if (!csv.empty()) {
        std::vector<std::vector<double>> rows;
        for (std::size_t r = 0; r < rep.exact_ms.size(); ++r)
            rows.push_back({double(r), rep.exact_ms[r], rep.approx_ms[r]});
        pgc::write_csv(csv, "rep,exact_ms,approx_ms", rows);
    }
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_synth(int height, int width, int count, int scenes, std::uint64_t seed,
              double head_scale, const std::string& out) {
    fs::create_directories(out);
    for (int i = 0; i < scenes; ++i) {
        pgc::Scene scene =
            pgc::synth_scene(height, width, count, seed + std::uint64_t(i), head_scale);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        pgc::save_scene(fs::path(out) / name, scene);
    }
    json j;
    j["scenes"] = scenes;
    j["out"] = out;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, int synth_scenes,
              std::optional<int> blocks, std::optional<std::uint64_t> seed,
              std::optional<int> epochs, const std::string& out) {
    json cfg = config_path.empty() ? json::object() : pgc::read_json(config_path);
    pgc::NetworkConfig ncfg = cfg.contains("network")
                                  ? pgc::network_config_from_json(cfg["network"])
                                  : pgc::NetworkConfig{};
    pgc::TrainerConfig tcfg = trainer_from_json(cfg.value("trainer", json::object()));
    if (blocks) ncfg.num_pgc_blocks = *blocks;
    if (seed) tcfg.seed = *seed;
    if (epochs) tcfg.epochs = *epochs;

    const json dcfg = cfg.value("data", json::object());
    std::vector<pgc::Scene> scenes = load_or_synth_scenes(
        data_dir, synth_scenes > 0 ? synth_scenes : dcfg.value("synth_scenes", 8),
        dcfg.value("height", 32), dcfg.value("width", 32), dcfg.value("count", 12), tcfg.seed);

    pgc::Network<float> net = pgc::build_toy_net<float>(ncfg, tcfg.seed);
    pgc::calibrate_perspective(net, scenes.front().gt_perspective);
    std::vector<double> curve = pgc::train(net, scenes, tcfg);
    for (pgc::ParamRef<float> r : net.param_refs())
        if (pgc::has_nan(std::vector<float>(r.data, r.data + r.n))) {
            std::cerr << "numerical failure: NaN in trained parameters\n";
            return kExitNumerical;
        }

    json run;
    run["epochs"] = tcfg.epochs;
    run["seed"] = tcfg.seed;
    if (!curve.empty()) run["final_loss"] = curve.back();
    pgc::save_network(fs::path(out) / "checkpoint", net, run);
    std::vector<std::vector<double>> rows;
    for (std::size_t e = 0; e < curve.size(); ++e) rows.push_back({double(e), curve[e]});
    fs::create_directories(out);
    pgc::write_csv(fs::path(out) / "loss.csv", "epoch,loss", rows);

    json j;
    j["epochs"] = tcfg.epochs;
    j["final_loss"] = curve.empty() ? 0.0 : curve.back();
    j["checkpoint"] = (fs::path(out) / "checkpoint").string();
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& pred_csv, const std::string& gt_csv, const std::string& net_dir,
             const std::string& data_dir, int synth_scenes, std::uint64_t seed,
             const std::string& out) {
    double mae = 0.0, mse = 0.0;
    if (!pred_csv.empty() || !gt_csv.empty()) {
        if (pred_csv.empty() || gt_csv.empty())
            throw std::invalid_argument("--pred and --gt must be given together");
        std::tie(mae, mse) = pgc::mae_mse(read_count_csv(pred_csv), read_count_csv(gt_csv));
    } else {
        if (net_dir.empty()) throw std::invalid_argument("need --net or --pred/--gt");
        pgc::Network<float> net = pgc::load_network<float>(net_dir);
        std::vector<pgc::Scene> scenes =
            load_or_synth_scenes(data_dir, synth_scenes, 32, 32, 12, seed);
        std::tie(mae, mse) = pgc::evaluate_counts(net, scenes);
    }
    if (std::isnan(mae) || std::isnan(mse)) {
        std::cerr << "numerical failure: NaN metric\n";
        return kExitNumerical;
    }
    json j;
    j["mae"] = mae;
    j["mse"] = mse;
    if (!out.empty()) pgc::write_json(out, j);
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_penet(int phase, const std::string& widths_csv, const std::string& in_ckpt,
              const std::string& net_dir, const std::string& mode_name,
              const std::string& data_dir, int synth_scenes, double lr, double momentum,
              int epochs, std::uint64_t seed, const std::string& out) {
    pgc::TrainerConfig tcfg;
    tcfg.learning_rate = lr;
    tcfg.momentum = momentum;
    tcfg.weight_decay = 0.0;
    tcfg.epochs = epochs;
    tcfg.seed = seed;

    pgc::PENetParams<float> penet;
    if (!in_ckpt.empty()) {
        penet = pgc::load_penet<float>(in_ckpt);
    } else {
        pgc::PENetConfig pcfg;
        if (!widths_csv.empty()) {
            pcfg.widths.clear();
            std::stringstream ss(widths_csv);
            std::string tok;
            while (std::getline(ss, tok, ',')) pcfg.widths.push_back(std::stoi(tok));
        }
        penet = pgc::build_penet<float>(pcfg, seed);
    }

    std::vector<pgc::Scene> scenes = load_or_synth_scenes(data_dir, synth_scenes, 32, 32, 12, seed);

    pgc::PhaseReport rep;
    if (phase == 1) {
        std::vector<pgc::Mapf> maps;
        for (const pgc::Scene& s : scenes) maps.push_back(pgc::scale_to_unit(s.gt_perspective));
        rep = pgc::train_phase1(penet, maps, tcfg);
    } else if (phase == 2) {
        std::vector<std::pair<pgc::Tensorf, pgc::Mapf>> pairs;
        for (const pgc::Scene& s : scenes)
            pairs.emplace_back(s.image, pgc::scale_to_unit(s.gt_perspective));
        rep = pgc::train_phase2(penet, pairs, tcfg);
    } else if (phase == 3) {
        if (net_dir.empty()) throw std::invalid_argument("phase 3 needs --net");
        pgc::Network<float> net = pgc::load_network<float>(net_dir);
        pgc::FinetuneMode mode;
        if (mode_name == "ours_a") mode = pgc::FinetuneMode::OursA;
        else if (mode_name == "ours_b") mode = pgc::FinetuneMode::OursB;
        else throw std::invalid_argument("--mode must be ours_a or ours_b");
        rep = pgc::finetune_phase3(net, penet, scenes, mode, tcfg);
        if (!out.empty()) pgc::save_network(fs::path(out) / "network", net);
    } else {
        throw std::invalid_argument("--phase must be 1, 2 or 3");
    }

    for (double v : rep.loss_curve)
        if (std::isnan(v)) {
            std::cerr << "numerical failure: NaN loss\n";
            return kExitNumerical;
        }

    json run;
    run["phase"] = rep.phase;
    run["final_mae"] = rep.final_mae;
    run["final_mse"] = rep.final_mse;
    if (!out.empty()) {
        pgc::save_penet(fs::path(out) / "estimator", penet, run);
        std::vector<std::vector<double>> rows;
        for (std::size_t e = 0; e < rep.loss_curve.size(); ++e)
            rows.push_back({double(e), rep.loss_curve[e]});
        fs::create_directories(out);
        pgc::write_csv(fs::path(out) / "loss.csv", "epoch,loss", rows);
    }
    std::cout << run.dump(2) << "\n";
    return kExitOk;
}

int cmd_gradcheck(int blocks, std::uint64_t seed, double h, double tol) {
    pgc::NetworkConfig cfg;
    cfg.backbone_channels = {3, 4};
    cfg.num_pgc_blocks = blocks;
    cfg.block_out_channels = 2;
    pgc::Network<double> net = pgc::build_toy_net<double>(cfg, seed);
    pgc::Rng rng(seed + 1);
    for (pgc::PGCBlockParams<double>& blk : net.blocks) {
        blk.persp.alpha = 2.0;
        blk.persp.beta = 0.5;
        blk.persp.a = 0.6;
        blk.persp.p0 = -0.5;
        for (double& b : blk.conv.b) b = rng.uniform(-0.1, 0.1);
    }
    for (pgc::ConvLayer<double>& l : net.backbone)
        for (double& b : l.b) b = rng.uniform(-0.1, 0.1);
    for (double& b : net.head.b) b = rng.uniform(-0.1, 0.1);

    pgc::Scene scene = pgc::synth_scene(32, 32, 10, seed + 2);
    for (float& v : scene.gt_perspective.v) v = 0.3f + 0.4f * (v - 0.5f);
    for (float& v : scene.image.v) v += 0.3f;

    pgc::GradReport rep = pgc::gradcheck(net, scene, h, tol);
    json j;
    j["max_rel_error"] = rep.max_rel_error;
    j["mean_rel_error"] = rep.mean_rel_error;
    j["checked"] = rep.checked;
    j["skipped_hinge"] = rep.skipped_hinge;
    j["pass"] = rep.pass;
    std::cout << j.dump(2) << "\n";
    return rep.pass ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"perspective-guided convolution toolkit"};
    app.require_subcommand(1);

    try {
        parse_threads_env();
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    // dict
    DictFlags dict_flags;
    std::string dict_out;
    CLI::App* dict = app.add_subcommand("dict", "build a kernel dictionary");
    add_dict_flags(dict, dict_flags);
    dict->add_option("--out", dict_out, "output directory");

    // filter
    DictFlags filter_dict_flags;
    std::string filter_input, filter_persp, filter_out, filter_mode = "approx",
                filter_padding = "replicate", filter_dict_dir;
    double f_alpha = 1.0, f_beta = 0.0, f_a = 1.0, f_p0 = 0.0;
    CLI::App* filter = app.add_subcommand("filter", "spatially variant smoothing");
    filter->add_option("--input", filter_input, "input tensor container")->required();
    filter->add_option("--perspective", filter_persp, "perspective map container")->required();
    filter->add_option("--out", filter_out, "output tensor container")->required();
    filter->add_option("--mode", filter_mode, "exact | approx");
    filter->add_option("--padding", filter_padding, "replicate | zero");
    filter->add_option("--dict", filter_dict_dir, "dictionary directory (else built from flags)");
    add_dict_flags(filter, filter_dict_flags);
    filter->add_option("--alpha", f_alpha, "sigmoid slope");
    filter->add_option("--beta", f_beta, "sigmoid center");
    filter->add_option("--a", f_a, "blur scale");
    filter->add_option("--p0", f_p0, "blur offset");

    // bench
    DictFlags bench_dict_flags;
    int b_channels = 64, b_height = 96, b_width = 128, b_reps = 5;
    std::uint64_t b_seed = 0;
    std::string bench_out, bench_csv, bench_dict_dir;
    CLI::App* bench = app.add_subcommand("bench", "time exact vs approximate filtering");
    bench->add_option("--channels", b_channels, "input channels");
    bench->add_option("--height", b_height, "input height");
    bench->add_option("--width", b_width, "input width");
    bench->add_option("--reps", b_reps, "repetitions (>= 3)");
    bench->add_option("--seed", b_seed, "input seed");
    bench->add_option("--dict", bench_dict_dir, "dictionary directory");
    add_dict_flags(bench, bench_dict_flags);
    bench->add_option("--out", bench_out, "JSON report path");
    bench->add_option("--csv", bench_csv, "per-rep timing CSV path");

    // synth
    int s_height = 32, s_width = 32, s_count = 12, s_scenes = 1;
    std::uint64_t s_seed = 0;
    double s_head_scale = 1.0;
    std::string synth_out;
    CLI::App* synth = app.add_subcommand("synth", "generate synthetic scenes");
    synth->add_option("--height", s_height, "scene height (>= 32)");
    synth->add_option("--width", s_width, "scene width (>= 32)");
    synth->add_option("--count", s_count, "heads per scene");
    synth->add_option("--scenes", s_scenes, "number of scenes");
    synth->add_option("--seed", s_seed, "base seed");
    synth->add_option("--head-scale", s_head_scale, "head radius per perspective unit");
    synth->add_option("--out", synth_out, "output directory")->required();

    // train
    std::string t_config, t_data, t_out;
    int t_synth = 0;
    std::optional<int> t_blocks, t_epochs;
    std::optional<std::uint64_t> t_seed;
    CLI::App* train = app.add_subcommand("train", "train the density network");
    train->add_option("--config", t_config, "run-config JSON");
    train->add_option("--data", t_data, "scene directory");
    train->add_option("--synth-scenes", t_synth, "generate this many scenes instead");
    train->add_option("--blocks", [&t_blocks](const std::vector<std::string>& v) {
        t_blocks = std::stoi(v[0]);
        return true;
    }, "override block count");
    train->add_option("--epochs", [&t_epochs](const std::vector<std::string>& v) {
        t_epochs = std::stoi(v[0]);
        return true;
    }, "override epochs");
    train->add_option("--seed", [&t_seed](const std::vector<std::string>& v) {
        t_seed = std::stoull(v[0]);
        return true;
    }, "override seed");
    train->add_option("--out", t_out, "output directory")->required();

    // eval
    std::string e_pred, e_gt, e_net, e_data, e_out;
    int e_synth = 0;
    std::uint64_t e_seed = 0;
    CLI::App* eval = app.add_subcommand("eval", "counting metrics");
    eval->add_option("--pred", e_pred, "predicted counts CSV (one per line)");
    eval->add_option("--gt", e_gt, "ground-truth counts CSV");
    eval->add_option("--net", e_net, "network checkpoint directory");
    eval->add_option("--data", e_data, "scene directory");
    eval->add_option("--synth-scenes", e_synth, "evaluate on generated scenes");
    eval->add_option("--seed", e_seed, "seed for generated scenes");
    eval->add_option("--out", e_out, "JSON report path");

    // penet
    int p_phase = 1, p_synth = 8, p_epochs = 50;
    std::string p_widths, p_in, p_net, p_mode = "ours_a", p_data, p_out;
    double p_lr = 0.05, p_momentum = 0.9;
    std::uint64_t p_seed = 0;
    CLI::App* penet = app.add_subcommand("penet", "perspective estimator phases");
    penet->add_option("--phase", p_phase, "1 | 2 | 3")->required();
    penet->add_option("--widths", p_widths, "comma-separated stage widths");
    penet->add_option("--in", p_in, "estimator checkpoint to continue from");
    penet->add_option("--net", p_net, "density network checkpoint (phase 3)");
    penet->add_option("--mode", p_mode, "ours_a | ours_b (phase 3)");
    penet->add_option("--data", p_data, "scene directory");
    penet->add_option("--synth-scenes", p_synth, "generate this many scenes instead");
    penet->add_option("--lr", p_lr, "learning rate");
    penet->add_option("--momentum", p_momentum, "momentum");
    penet->add_option("--epochs", p_epochs, "epochs");
    penet->add_option("--seed", p_seed, "seed");
    penet->add_option("--out", p_out, "output directory");

    // gradcheck
    int g_blocks = 1;
    std::uint64_t g_seed = 0;
    double g_h = 1e-4, g_tol = 1e-4;
    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
    grad->add_option("--blocks", g_blocks, "PGC block count");
    grad->add_option("--seed", g_seed, "seed");
    grad->add_option("--fd-step", g_h, "finite-difference step");
    grad->add_option("--tol", g_tol, "max relative error tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (dict->parsed()) return cmd_dict(dict_flags, dict_out);
        if (filter->parsed())
            return cmd_filter(filter_input, filter_persp, filter_out, filter_mode, filter_padding,
                              filter_dict_flags, filter_dict_dir, f_alpha, f_beta, f_a, f_p0);
        if (bench->parsed())
            return cmd_bench(b_channels, b_height, b_width, b_reps, b_seed, bench_dict_flags,
                             bench_dict_dir, bench_out, bench_csv);
        if (synth->parsed())
            return cmd_synth(s_height, s_width, s_count, s_scenes, s_seed, s_head_scale,
                             synth_out);
        if (train->parsed())
            return cmd_train(t_config, t_data, t_synth, t_blocks, t_seed, t_epochs, t_out);
        if (eval->parsed())
            return cmd_eval(e_pred, e_gt, e_net, e_data, e_synth, e_seed, e_out);
        if (penet->parsed())
            return cmd_penet(p_phase, p_widths, p_in, p_net, p_mode, p_data, p_synth, p_lr,
                             p_momentum, p_epochs, p_seed, p_out);
        if (grad->parsed()) return cmd_gradcheck(g_blocks, g_seed, g_h, g_tol);
    } catch (const pgc::io_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
