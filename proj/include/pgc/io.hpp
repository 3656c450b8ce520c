#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pgc/bench.hpp"
#include "pgc/density.hpp"
#include "pgc/dictionary.hpp"
#include "pgc/penet.hpp"
#include "pgc/pgc_net.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

/// File and data-format failures (distinct from argument validation, so the
/// CLI can map them to the data-error exit code).
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::uint32_t kContainerVersion = 1;

/// Binary tensor container: magic "FTNS", version u32, rank u32, dims
/// (rank x u32), float32 payload; all little-endian, row-major with the
/// slowest dimension first.
inline void write_container(const std::filesystem::path& path, const std::vector<float>& data,
                            const std::vector<std::uint32_t>& dims) {
    require(!dims.empty() && dims.size() <= 4, "write_container: rank must be in [1,4]");
    std::uint64_t n = 1;
    for (std::uint32_t d : dims) {
        require(d >= 1, "write_container: dims must be >= 1");
        n *= d;
    }
    require(n == data.size(), "write_container: payload length mismatch");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path.string());
    f.write("FTNS", 4);
    const std::uint32_t version = kContainerVersion;
    const std::uint32_t rank = static_cast<std::uint32_t>(dims.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&rank), 4);
    f.write(reinterpret_cast<const char*>(dims.data()), 4 * std::streamsize(dims.size()));
    f.write(reinterpret_cast<const char*>(data.data()), 4 * std::streamsize(data.size()));
    if (!f) throw io_error("write failed: " + path.string());
}

inline std::pair<std::vector<float>, std::vector<std::uint32_t>> read_container(
    const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "FTNS", 4) != 0)
        throw io_error("bad container magic: " + path.string());
    std::uint32_t version = 0, rank = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || version != kContainerVersion)
        throw io_error("unsupported container version: " + path.string());
    if (rank < 1 || rank > 4) throw io_error("bad container rank: " + path.string());
    std::vector<std::uint32_t> dims(rank);
    f.read(reinterpret_cast<char*>(dims.data()), 4 * rank);
    std::uint64_t n = 1;
    for (std::uint32_t d : dims) {
        if (d < 1) throw io_error("bad container dim: " + path.string());
        n *= d;
    }
    std::vector<float> data(n);
    f.read(reinterpret_cast<char*>(data.data()), 4 * std::streamsize(n));
    if (!f) throw io_error("truncated container: " + path.string());
    char extra;
    if (f.read(&extra, 1)) throw io_error("trailing bytes in container: " + path.string());
    return {std::move(data), std::move(dims)};
}

inline void save_tensor(const std::filesystem::path& path, const Tensorf& x) {
    write_container(path, x.v,
                    {std::uint32_t(x.channels), std::uint32_t(x.height), std::uint32_t(x.width)});
}

inline Tensorf load_tensor(const std::filesystem::path& path) {
    auto [data, dims] = read_container(path);
    if (dims.size() != 3) throw io_error("expected a rank-3 container: " + path.string());
    Tensorf x{int(dims[0]), int(dims[1]), int(dims[2])};
    x.v = std::move(data);
    return x;
}

inline void save_map(const std::filesystem::path& path, const Mapf& m) {
    write_container(path, m.v, {std::uint32_t(m.height), std::uint32_t(m.width)});
}

inline Mapf load_map(const std::filesystem::path& path) {
    auto [data, dims] = read_container(path);
    if (dims.size() != 2) throw io_error("expected a rank-2 container: " + path.string());
    Mapf m{int(dims[0]), int(dims[1])};
    m.v = std::move(data);
    return m;
}

inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::vector<double>>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path.string());
    f << header << "\n";
    f.precision(17);
    for (const std::vector<double>& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
        f << "\n";
    }
    if (!f) throw io_error("write failed: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw io_error("write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open: " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw io_error("invalid JSON in " + path.string() + ": " + e.what());
    }
}

inline nlohmann::json dictionary_config_json(const DictionaryConfig& cfg) {
    return {{"kernel_size", cfg.kernel_size},
            {"sigma_min", cfg.sigma_min},
            {"sigma_max", cfg.sigma_max},
            {"sigma_step", cfg.sigma_step},
            {"mode", cfg.mode == NormalizationMode::UnitSum ? "unit_sum" : "paper_eq4"},
            {"energy_threshold", cfg.energy_threshold}};
}

inline DictionaryConfig dictionary_config_from_json(const nlohmann::json& j) {
    DictionaryConfig cfg;
    try {
        cfg.kernel_size = j.at("kernel_size").get<int>();
        cfg.sigma_min = j.at("sigma_min").get<double>();
        cfg.sigma_max = j.at("sigma_max").get<double>();
        cfg.sigma_step = j.at("sigma_step").get<double>();
        const std::string mode = j.at("mode").get<std::string>();
        if (mode == "unit_sum") cfg.mode = NormalizationMode::UnitSum;
        else if (mode == "paper_eq4") cfg.mode = NormalizationMode::PaperEq4;
        else throw io_error("unknown normalization mode: " + mode);
        cfg.energy_threshold = j.at("energy_threshold").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad dictionary config: ") + e.what());
    }
    return cfg;
}

/// Dictionary on disk: eigen-kernel and candidate containers next to a JSON
/// sidecar carrying the config and the full-precision scalars.
inline void save_dictionary(const std::filesystem::path& dir, const KernelDictionary& dict) {
    std::filesystem::create_directories(dir);
    const int area = dict.kernel_area();
    write_container(dir / "candidates.ftns", dict.candidates,
                    {std::uint32_t(dict.grid_size()), std::uint32_t(area)});
    write_container(dir / "eigen_kernels.ftns", dict.eigen_kernels,
                    {std::uint32_t(dict.retained_count), std::uint32_t(area)});
    nlohmann::json j;
    j["config"] = dictionary_config_json(dict.config);
    j["sigma_grid"] = dict.sigma_grid;
    j["singular_values"] = dict.singular_values;
    j["retained_count"] = dict.retained_count;
    j["energy_ratio"] = dict.energy_ratio;
    write_json(dir / "dictionary.json", j);
}

inline KernelDictionary load_dictionary(const std::filesystem::path& dir) {
    const nlohmann::json j = read_json(dir / "dictionary.json");
    KernelDictionary dict;
    try {
        dict.config = dictionary_config_from_json(j.at("config"));
        dict.sigma_grid = j.at("sigma_grid").get<std::vector<double>>();
        dict.singular_values = j.at("singular_values").get<std::vector<double>>();
        dict.retained_count = j.at("retained_count").get<int>();
        dict.energy_ratio = j.at("energy_ratio").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad dictionary sidecar: ") + e.what());
    }
    auto [cand, cdims] = read_container(dir / "candidates.ftns");
    auto [eig, edims] = read_container(dir / "eigen_kernels.ftns");
    const std::uint32_t area = std::uint32_t(dict.config.kernel_size * dict.config.kernel_size);
    if (cdims.size() != 2 || cdims[0] != dict.sigma_grid.size() || cdims[1] != area)
        throw io_error("candidate container shape mismatch");
    if (edims.size() != 2 || edims[0] != std::uint32_t(dict.retained_count) || edims[1] != area)
        throw io_error("eigen-kernel container shape mismatch");
    dict.candidates = std::move(cand);
    dict.eigen_kernels = std::move(eig);
    return dict;
}

inline nlohmann::json network_config_json(const NetworkConfig& cfg) {
    return {{"backbone_channels", cfg.backbone_channels},
            {"num_pgc_blocks", cfg.num_pgc_blocks},
            {"block_out_channels", cfg.block_out_channels},
            {"dictionary", dictionary_config_json(cfg.dictionary)}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig cfg;
    try {
        cfg.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
        cfg.num_pgc_blocks = j.at("num_pgc_blocks").get<int>();
        cfg.block_out_channels = j.at("block_out_channels").get<int>();
        cfg.dictionary = dictionary_config_from_json(j.at("dictionary"));
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad network config: ") + e.what());
    }
    return cfg;
}

namespace detail {

inline std::string param_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "param_%03zu.ftns", index);
    return buf;
}

template <typename T>
void save_param_refs(const std::filesystem::path& dir, std::vector<ParamRef<T>> refs) {
    for (std::size_t r = 0; r < refs.size(); ++r) {
        std::vector<float> data(refs[r].n);
        for (std::size_t t = 0; t < refs[r].n; ++t) data[t] = float(refs[r].data[t]);
        write_container(dir / param_file_name(r), data, {std::uint32_t(refs[r].n)});
    }
}

template <typename T>
void load_param_refs(const std::filesystem::path& dir, std::vector<ParamRef<T>> refs) {
    for (std::size_t r = 0; r < refs.size(); ++r) {
        auto [data, dims] = read_container(dir / param_file_name(r));
        if (dims.size() != 1 || data.size() != refs[r].n)
            throw io_error("checkpoint parameter shape mismatch: " + param_file_name(r));
        for (std::size_t t = 0; t < refs[r].n; ++t) refs[r].data[t] = T(data[t]);
    }
}

}  // namespace detail

/// Checkpoint layout: one rank-1 container per parameter tensor plus a JSON
/// manifest with the config and run metadata.
template <typename T>
void save_network(const std::filesystem::path& dir, Network<T>& net,
                  const nlohmann::json& extra = {}) {
    std::filesystem::create_directories(dir);
    std::vector<ParamRef<T>> refs = net.param_refs();
    detail::save_param_refs<T>(dir, refs);
    nlohmann::json j;
    j["kind"] = "pgc_network";
    j["config"] = network_config_json(net.config);
    j["param_tensors"] = refs.size();
    if (!extra.is_null() && !extra.empty()) j["run"] = extra;
    write_json(dir / "manifest.json", j);
}

template <typename T = float>
Network<T> load_network(const std::filesystem::path& dir) {
    const nlohmann::json j = read_json(dir / "manifest.json");
    if (j.value("kind", "") != "pgc_network") throw io_error("not a network checkpoint");
    Network<T> net = build_toy_net<T>(network_config_from_json(j.at("config")), 0);
    detail::load_param_refs<T>(dir, net.param_refs());
    return net;
}

template <typename T>
void save_penet(const std::filesystem::path& dir, PENetParams<T>& net,
                const nlohmann::json& extra = {}) {
    std::filesystem::create_directories(dir);
    std::vector<ParamRef<T>> refs = net.all_refs();
    detail::save_param_refs<T>(dir, refs);
    nlohmann::json j;
    j["kind"] = "penet";
    j["widths"] = net.config.widths;
    j["param_tensors"] = refs.size();
    if (!extra.is_null() && !extra.empty()) j["run"] = extra;
    write_json(dir / "manifest.json", j);
}

template <typename T = float>
PENetParams<T> load_penet(const std::filesystem::path& dir) {
    const nlohmann::json j = read_json(dir / "manifest.json");
    if (j.value("kind", "") != "penet") throw io_error("not an estimator checkpoint");
    PENetConfig cfg;
    try {
        cfg.widths = j.at("widths").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad estimator manifest: ") + e.what());
    }
    PENetParams<T> net = build_penet<T>(cfg, 0);
    detail::load_param_refs<T>(dir, net.all_refs());
    return net;
}

/// Scene directory: tensor containers for image/density/perspective, dots as
/// CSV, metadata JSON, ROI container when present.
inline void save_scene(const std::filesystem::path& dir, const Scene& scene) {
    std::filesystem::create_directories(dir);
    save_tensor(dir / "image.ftns", scene.image);
    save_map(dir / "density.ftns", scene.gt_density);
    save_map(dir / "perspective.ftns", scene.gt_perspective);
    std::vector<std::vector<double>> rows;
    for (const Dot& d : scene.dots) rows.push_back({d.x, d.y});
    write_csv(dir / "dots.csv", "x,y", rows);
    if (scene.roi) {
        std::vector<float> roi(scene.roi->v.begin(), scene.roi->v.end());
        write_container(dir / "roi.ftns", roi,
                        {std::uint32_t(scene.roi->height), std::uint32_t(scene.roi->width)});
    }
    nlohmann::json j;
    j["height"] = scene.image.height;
    j["width"] = scene.image.width;
    j["requested_count"] = scene.requested_count;
    j["placed_count"] = scene.placed_count;
    j["has_roi"] = bool(scene.roi);
    write_json(dir / "meta.json", j);
}

inline Scene load_scene(const std::filesystem::path& dir) {
    Scene scene;
    scene.image = load_tensor(dir / "image.ftns");
    scene.gt_density = load_map(dir / "density.ftns");
    scene.gt_perspective = load_map(dir / "perspective.ftns");
    const nlohmann::json j = read_json(dir / "meta.json");
    scene.requested_count = j.value("requested_count", 0);
    scene.placed_count = j.value("placed_count", 0);
    std::ifstream f(dir / "dots.csv");
    if (!f) throw io_error("cannot open: " + (dir / "dots.csv").string());
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const std::size_t comma = line.find(',');
        if (comma == std::string::npos) throw io_error("malformed dots.csv line: " + line);
        try {
            scene.dots.push_back({std::stod(line.substr(0, comma)),
                                  std::stod(line.substr(comma + 1))});
        } catch (const std::exception&) {
            throw io_error("malformed dots.csv line: " + line);
        }
    }
    if (j.value("has_roi", false)) {
        auto [data, dims] = read_container(dir / "roi.ftns");
        if (dims.size() != 2) throw io_error("expected a rank-2 roi container");
        RoiMask roi{int(dims[0]), int(dims[1]), false};
        for (std::size_t t = 0; t < data.size(); ++t) roi.v[t] = data[t] != 0.0f ? 1 : 0;
        scene.roi = std::move(roi);
    }
    return scene;
}

inline nlohmann::json bench_report_json(const BenchReport& rep) {
    nlohmann::json j;
    j["shape"] = {rep.channels, rep.height, rep.width};
    j["dictionary"] = dictionary_config_json(rep.dict_config);
    j["reps"] = rep.reps;
    j["seed"] = rep.seed;
    j["exact_ms"] = {{"median", rep.exact_median_ms},
                     {"min", rep.exact_min_ms},
                     {"max", rep.exact_max_ms}};
    j["approx_ms"] = {{"median", rep.approx_median_ms},
                      {"min", rep.approx_min_ms},
                      {"max", rep.approx_max_ms}};
    j["speedup"] = rep.speedup;
    j["input_checksum"] = rep.input_checksum;
    return j;
}

template <typename T>
bool has_nan(const std::vector<T>& v) {
    for (T x : v)
        if (std::isnan(double(x))) return true;
    return false;
}

}  // namespace pgc
