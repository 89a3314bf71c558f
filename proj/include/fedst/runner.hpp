#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedst/config.hpp"

namespace fedst {

// Experiment runner behind the CLI: dataset generation, federated and
// baseline runs with a reproducible run directory (config snapshot, metrics
// CSV, checkpoints, byte accounting, learning-curve SVG), checkpoint
// evaluation and component ablations.

// ---- checkpoint container: magic "FSTC" -------------------------------------

struct Checkpoint {
    ModelConfig model;
    ParamTree params;
    Indicator indicator;
    std::uint32_t site_id = 0;
    std::uint32_t sample_count = 0; // training clips behind this model
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
    ByteWriter wr;
    wr.put_bytes("FSTC", 4);
    wr.put_u16(1);
    wr.put_u32(ck.site_id);
    wr.put_u32(ck.sample_count);
    const ModelConfig& m = ck.model;
    for (int v : {m.in_h, m.in_w, m.in_ch, m.patch, m.channels, m.window, m.classes,
                  m.indicator_dim})
        wr.put_u32(static_cast<std::uint32_t>(v));
    wr.put_f64(m.lambda1);
    wr.put_u32(static_cast<std::uint32_t>(m.pool_sizes.size()));
    for (int p : m.pool_sizes) wr.put_u32(static_cast<std::uint32_t>(p));
    wr.put_u32(static_cast<std::uint32_t>(m.recept_fields.size()));
    for (int r : m.recept_fields) wr.put_u32(static_cast<std::uint32_t>(r));

    wr.put_u8(static_cast<std::uint8_t>(ck.indicator.kind));
    wr.put_u32(static_cast<std::uint32_t>(ck.indicator.xi.size()));
    for (double v : ck.indicator.xi.data()) wr.put_f64(v);

    wr.put_u32(static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& [path, t] : ck.params.entries()) {
        wr.put_string(path);
        wr.put_u8(ck.params.role(path) == ParamRole::Private ? 1 : 0);
        wr.put_u32(static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) wr.put_u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) wr.put_f64(v);
    }
    const std::uint32_t crc = crc32(wr.bytes());
    wr.put_u32(crc);
    return wr.take();
}

inline Checkpoint decode_checkpoint(const Bytes& bytes) {
    if (bytes.size() < 10) throw DataError("checkpoint too short");
    if (crc32(bytes.data(), bytes.size() - 4) !=
        ByteReader(bytes.data() + bytes.size() - 4, 4).get_u32())
        throw DataError("checkpoint checksum mismatch");
    ByteReader rd(bytes.data(), bytes.size() - 4);
    if (std::memcmp(rd.take(4), "FSTC", 4) != 0) throw DataError("not a checkpoint file");
    if (rd.get_u16() != 1) throw DataError("unsupported checkpoint version");
    Checkpoint ck;
    ck.site_id = rd.get_u32();
    ck.sample_count = rd.get_u32();
    ModelConfig& m = ck.model;
    m.in_h = static_cast<int>(rd.get_u32());
    m.in_w = static_cast<int>(rd.get_u32());
    m.in_ch = static_cast<int>(rd.get_u32());
    m.patch = static_cast<int>(rd.get_u32());
    m.channels = static_cast<int>(rd.get_u32());
    m.window = static_cast<int>(rd.get_u32());
    m.classes = static_cast<int>(rd.get_u32());
    m.indicator_dim = static_cast<int>(rd.get_u32());
    m.lambda1 = rd.get_f64();
    m.pool_sizes.assign(rd.get_u32(), 0);
    for (int& p : m.pool_sizes) p = static_cast<int>(rd.get_u32());
    m.recept_fields.assign(rd.get_u32(), 0);
    for (int& r : m.recept_fields) r = static_cast<int>(rd.get_u32());

    ck.indicator.kind = static_cast<IndicatorKind>(rd.get_u8());
    ck.indicator.xi = Tensor(Shape{static_cast<int>(rd.get_u32())});
    for (double& v : ck.indicator.xi.data()) v = rd.get_f64();

    const std::uint32_t n_params = rd.get_u32();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string path = rd.get_string();
        const ParamRole role = rd.get_u8() ? ParamRole::Private : ParamRole::Shared;
        Shape shape(rd.get_u32(), 0);
        for (int& d : shape) d = static_cast<int>(rd.get_u32());
        Tensor t(shape, 0.0, true);
        for (double& v : t.data()) v = rd.get_f64();
        ck.params.insert(path, std::move(t), role);
    }
    if (!rd.done()) throw DataError("trailing bytes in checkpoint");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const Bytes b = encode_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out) throw DataError("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    const std::streamsize n = in.tellg();
    in.seekg(0);
    Bytes b(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(b.data()), n);
    if (!in) throw DataError("short read on checkpoint: " + path);
    return decode_checkpoint(b);
}

// ---- gen ---------------------------------------------------------------------

/// Background family per federated site; family 4 stays reserved for the
/// out-of-federation set.
inline int background_family_for_site(int site_id) { return site_id < 4 ? site_id : site_id + 1; }

inline SceneSpec scene_spec_for_site(const RunConfig& rc, const SiteConfig& sc) {
    SceneSpec spec;
    spec.site_id = sc.id;
    apply_background_band(spec, background_family_for_site(sc.id));
    spec.height = rc.model.in_h;
    spec.width = rc.model.in_w;
    spec.channels = rc.model.in_ch;
    spec.frames = rc.model.frames();
    spec.seed = sc.seed;
    spec.meta = "site=" + std::to_string(sc.id) + ";" + sc.text;
    return spec;
}

/// Generate the K site files plus the synthetic and out-of-federation sets.
/// Returns the file paths written. Existing files are only replaced with
/// `force`.
inline std::vector<std::string> cmd_gen(const RunConfig& rc, bool force) {
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    for (const auto& sc : rc.sites) paths.push_back(rc.site_dataset_path(sc.id));
    paths.push_back(rc.synth_dataset_path());
    paths.push_back(rc.outfed_dataset_path());
    if (!force)
        for (const auto& p : paths)
            if (fs::exists(p))
                throw ConfigError("refusing to overwrite " + p + " (use --force)");
    fs::create_directories(rc.data_dir);

    for (const auto& sc : rc.sites)
        save_dataset(gen_site_dataset(scene_spec_for_site(rc, sc), sc.clips),
                     rc.site_dataset_path(sc.id));
    {
        SceneSpec spec;
        spec.height = rc.model.in_h;
        spec.width = rc.model.in_w;
        spec.channels = rc.model.in_ch;
        spec.seed = Rng(rc.seed).fork(0x5717).next_u64();
        save_dataset(gen_synth_dataset(spec, rc.synth_clips), rc.synth_dataset_path());
    }
    {
        SceneSpec spec;
        spec.height = rc.model.in_h;
        spec.width = rc.model.in_w;
        spec.channels = rc.model.in_ch;
        spec.frames = rc.model.frames();
        spec.seed = rc.outfed_seed;
        save_dataset(gen_out_of_fed_site(spec, rc.outfed_clips), rc.outfed_dataset_path());
    }
    return paths;
}

// ---- run ---------------------------------------------------------------------

struct LoadedData {
    std::vector<Dataset> sites;
    Dataset synth;
};

inline LoadedData load_run_data(const RunConfig& rc) {
    LoadedData data;
    for (const auto& sc : rc.sites) {
        const std::string path = rc.site_dataset_path(sc.id);
        if (!std::filesystem::exists(path))
            throw ConfigError("dataset file missing: " + path + " (run `fedst gen` first)");
        data.sites.push_back(load_dataset(path));
    }
    const std::string sp = rc.synth_dataset_path();
    if (!std::filesystem::exists(sp)) throw ConfigError("dataset file missing: " + sp);
    data.synth = load_dataset(sp);
    return data;
}

inline const char* method_name(int m) {
    switch (m) {
        case 0: return "fedst";
        case 1: return "fedavg";
        case 2: return "local";
    }
    return "?";
}

enum class Method { FedST = 0, FedAvg = 1, LocalOnly = 2 };

inline Method method_from_name(const std::string& s) {
    if (s == "fedst") return Method::FedST;
    if (s == "fedavg") return Method::FedAvg;
    if (s == "local") return Method::LocalOnly;
    throw ConfigError("unknown method: " + s + " (expected fedst|fedavg|local)");
}

/// Per-site mean-Dice polylines over rounds, written as a standalone SVG.
inline std::string learning_curve_svg(const FedResult& result) {
    const int width = 640, height = 400, mx = 50, my = 30;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << " " << height
        << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << mx << "\" y1=\"" << height - my << "\" x2=\"" << width - 10
        << "\" y2=\"" << height - my << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << mx << "\" y1=\"" << height - my << "\" x2=\"" << mx
        << "\" y2=\"10\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 6
        << "\" font-size=\"12\">round</text>\n";
    svg << "<text x=\"12\" y=\"20\" font-size=\"12\">mean dice</text>\n";
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    if (!result.rounds.empty()) {
        const std::size_t n_sites = result.rounds.front().per_site.size();
        const int last_round = result.rounds.back().round;
        for (std::size_t k = 0; k < n_sites; ++k) {
            svg << "<polyline fill=\"none\" stroke=\"" << colors[k % 8]
                << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& rm : result.rounds) {
                const double x =
                    mx + (width - mx - 20) *
                             (last_round ? static_cast<double>(rm.round) / last_round : 0.0);
                const double dice = rm.per_site[k].row(rm.per_site[k].classes()).dice;
                const double y = (height - my) - (height - my - 20) * dice;
                svg << x << ',' << y << ' ';
            }
            svg << "\"/>\n";
            svg << "<text x=\"" << width - 90 << "\" y=\"" << 20 + 14 * k << "\" fill=\""
                << colors[k % 8] << "\" font-size=\"12\">site " << k << "</text>\n";
        }
    }
    svg << "</svg>\n";
    return svg.str();
}

struct RunOutput {
    std::string run_dir;
    std::string metrics_csv_path;
    FedResult result;
};

/// Execute one method over the configured sites and persist the run
/// directory. Output is a pure function of the config snapshot.
inline RunOutput cmd_run(const RunConfig& rc, Method method,
                         const std::string& output_override = "") {
    namespace fs = std::filesystem;
    const LoadedData data = load_run_data(rc);
    for (std::size_t k = 0; k < data.sites.size(); ++k) {
        const Dataset& ds = data.sites[k];
        if (ds.height != rc.model.in_h || ds.width != rc.model.in_w ||
            ds.channels != rc.model.in_ch)
            throw DataError("site dataset " + std::to_string(k) + " does not match the model");
        for (const Clip& c : ds.clips)
            for (const auto& m : c.masks)
                for (std::uint8_t v : m)
                    if (v >= rc.model.classes) throw DataError("mask label out of range");
    }

    std::vector<const Dataset*> site_ptrs;
    for (const auto& ds : data.sites) site_ptrs.push_back(&ds);

    FedEngineConfig fc = rc.engine_config();
    std::unique_ptr<Transport> transport;
    FedResult result;
    switch (method) {
        case Method::FedST:
            if (rc.transport_mode == TransportMode::LoopbackSocket)
                transport = std::make_unique<LoopbackSocketTransport>(
                    static_cast<int>(rc.sites.size()),
                    static_cast<std::uint16_t>(rc.transport_port));
            result = run_federation(fc, site_ptrs, &data.synth, transport.get());
            break;
        case Method::FedAvg:
            if (rc.transport_mode == TransportMode::LoopbackSocket)
                transport = std::make_unique<LoopbackSocketTransport>(
                    static_cast<int>(rc.sites.size()),
                    static_cast<std::uint16_t>(rc.transport_port));
            result = run_fedavg(fc, site_ptrs, &data.synth, transport.get());
            break;
        case Method::LocalOnly:
            result = run_local_only(fc, site_ptrs, &data.synth);
            break;
    }

    RunOutput out;
    out.run_dir = output_override.empty()
                      ? rc.output_dir + "/" + method_name(static_cast<int>(method))
                      : output_override;
    fs::create_directories(out.run_dir);

    { // config snapshot: rerunning from it reproduces this run bit-exactly
        std::ofstream snap(out.run_dir + "/config.snapshot.ini", std::ios::trunc);
        snap << rc.raw_text;
    }
    {
        std::ofstream info(out.run_dir + "/run_info.txt", std::ios::trunc);
        info << "method=" << method_name(static_cast<int>(method)) << "\n"
             << "seed=" << rc.seed << "\n"
             << "message_bytes=" << result.message_bytes << "\n"
             << "server_steps=" << result.server_steps << "\n";
    }

    const std::string run_id =
        std::string(method_name(static_cast<int>(method))) + "-s" + std::to_string(rc.seed);
    out.metrics_csv_path = out.run_dir + "/metrics.csv";
    {
        std::ofstream csv(out.metrics_csv_path, std::ios::trunc);
        csv << metrics_csv_header() << "\n";
        for (const auto& rm : result.rounds)
            for (std::size_t k = 0; k < rm.per_site.size(); ++k)
                csv << metrics_csv_rows(run_id, rm.round, "site" + std::to_string(k),
                                        rm.per_site[k]);
    }
    {
        std::ofstream svg(out.run_dir + "/curve.svg", std::ios::trunc);
        svg << learning_curve_svg(result);
    }
    for (std::size_t k = 0; k < result.site_models.size(); ++k) {
        Checkpoint ck{result.model_cfg, result.site_models[k].clone(),
                      result.site_indicators[k], static_cast<std::uint32_t>(k),
                      static_cast<std::uint32_t>(result.site_sample_counts[k])};
        save_checkpoint(ck, out.run_dir + "/site_" + std::to_string(k) + ".ckpt");
    }
    {
        Checkpoint ck{result.model_cfg, result.global_model.clone(), result.server_indicator,
                      0xFFFFFFFFu, 0};
        save_checkpoint(ck, out.run_dir + "/global.ckpt");
    }
    out.result = std::move(result);
    return out;
}

// ---- eval ----------------------------------------------------------------------

struct EvalRequest {
    std::string checkpoint;   // file (site mode) or run directory (global mode)
    std::string dataset_path;
    bool global_merge = false;
    int site = -1;
    double test_fraction = 0.0; // 0: evaluate every clip
};

/// Evaluate a checkpoint (or the weighted merge of all site checkpoints in a
/// run directory) on a dataset file.
inline MetricAccumulator cmd_eval(const EvalRequest& req) {
    if (!std::filesystem::exists(req.dataset_path))
        throw ConfigError("dataset file missing: " + req.dataset_path);
    Dataset ds = load_dataset(req.dataset_path);

    Checkpoint ck;
    if (req.global_merge) {
        // weighted-average the personalized models into one inference model
        namespace fs = std::filesystem;
        if (!fs::is_directory(req.checkpoint))
            throw ConfigError("--global expects a run directory, got " + req.checkpoint);
        FedResult pool;
        for (int k = 0;; ++k) {
            const std::string p = req.checkpoint + "/site_" + std::to_string(k) + ".ckpt";
            if (!fs::exists(p)) break;
            Checkpoint site_ck = load_checkpoint(p);
            pool.model_cfg = site_ck.model;
            pool.site_models.push_back(std::move(site_ck.params));
            pool.site_indicators.push_back(site_ck.indicator);
            pool.site_sample_counts.push_back(
                site_ck.sample_count ? static_cast<int>(site_ck.sample_count) : 1);
        }
        if (pool.site_models.empty())
            throw ConfigError("no site checkpoints found in " + req.checkpoint);
        auto [merged, ind] = merge_site_models(pool, /*weighted=*/true);
        ck.model = pool.model_cfg;
        ck.params = std::move(merged);
        ck.indicator = std::move(ind);
    } else {
        if (!std::filesystem::exists(req.checkpoint))
            throw ConfigError("checkpoint missing: " + req.checkpoint);
        ck = load_checkpoint(req.checkpoint);
        if (req.site >= 0 && ck.site_id != static_cast<std::uint32_t>(req.site))
            throw ConfigError("checkpoint belongs to site " + std::to_string(ck.site_id));
    }
    ck.model.validate();
    if (ds.height != ck.model.in_h || ds.width != ck.model.in_w ||
        ds.channels != ck.model.in_ch)
        throw DataError("dataset does not match the checkpointed model");

    std::vector<int> indices;
    if (req.test_fraction > 0.0) {
        indices = split_dataset(static_cast<int>(ds.clips.size()), req.test_fraction).test;
    } else {
        for (std::size_t i = 0; i < ds.clips.size(); ++i) indices.push_back(static_cast<int>(i));
    }
    const WindowGeometry geo = compute_window_geometry(ck.model);
    return eval_model(ck.model, geo, ck.params, ds, indices, ck.indicator, ForwardFlags{});
}

// ---- ablate --------------------------------------------------------------------

struct AblationRow {
    std::string name;
    std::vector<double> site_dice; // final-round mean dice per site
    double avg_dice = 0.0;
    double outfed_dice = 0.0;
};

inline FedEngineConfig apply_toggle(FedEngineConfig fc, const std::string& toggle) {
    if (toggle == "ts")
        fc.flags.temporal = false;
    else if (toggle == "cs")
        fc.flags.select = false;
    else if (toggle == "prompt")
        fc.prompt = false;
    else if (toggle == "serq")
        fc.serq = false;
    else
        throw ConfigError("unknown ablation toggle: " + toggle + " (expected ts|prompt|cs|serq)");
    return fc;
}

inline AblationRow ablation_row(const std::string& name, const FedEngineConfig& fc,
                                const std::vector<const Dataset*>& sites, const Dataset* synth,
                                const Dataset* outfed) {
    FedResult result = run_federation(fc, sites, synth);
    AblationRow row;
    row.name = name;
    const RoundMetrics& last = result.rounds.back();
    for (const auto& acc : last.per_site) {
        row.site_dice.push_back(acc.row(acc.classes()).dice);
        row.avg_dice += row.site_dice.back();
    }
    row.avg_dice /= static_cast<double>(row.site_dice.size());
    if (outfed) {
        auto [merged, ind] = merge_site_models(result);
        const WindowGeometry geo = compute_window_geometry(fc.model);
        std::vector<int> all(outfed->clips.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        MetricAccumulator acc =
            eval_model(fc.model, geo, merged, *outfed, all, ind, fc.flags);
        row.outfed_dice = acc.row(acc.classes()).dice;
    }
    return row;
}

/// One full-configuration row plus one row per requested toggle.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& rc,
                                           const std::vector<std::string>& toggles) {
    const LoadedData data = load_run_data(rc);
    std::vector<const Dataset*> site_ptrs;
    for (const auto& ds : data.sites) site_ptrs.push_back(&ds);
    Dataset outfed;
    const Dataset* outfed_ptr = nullptr;
    if (std::filesystem::exists(rc.outfed_dataset_path())) {
        outfed = load_dataset(rc.outfed_dataset_path());
        outfed_ptr = &outfed;
    }

    std::vector<AblationRow> rows;
    rows.push_back(
        ablation_row("full", rc.engine_config(), site_ptrs, &data.synth, outfed_ptr));
    for (const auto& t : toggles)
        rows.push_back(ablation_row("no-" + t, apply_toggle(rc.engine_config(), t), site_ptrs,
                                    &data.synth, outfed_ptr));
    return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "config";
    if (!rows.empty())
        for (std::size_t k = 0; k < rows.front().site_dice.size(); ++k) os << ",site" << k;
    os << ",avg,out_of_fed\n";
    for (const auto& r : rows) {
        os << r.name;
        for (double d : r.site_dice) os << ',' << format_metric(d);
        os << ',' << format_metric(r.avg_dice) << ',' << format_metric(r.outfed_dice) << "\n";
    }
    return os.str();
}

} // namespace fedst
