#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "fedst/runner.hpp"

using namespace fedst;
namespace fs = std::filesystem;

namespace {

std::string tiny_ini(const fs::path& root) {
    std::ostringstream ini;
    ini << "# tiny experiment for runner tests\n"
        << "[model]\n"
        << "h0 = 8\nw0 = 8\nin_channels = 2\npatch = 2\nchannels = 4\nwindow = 2\n"
        << "pools = 2,2,1\nclasses = 4\nindicator_dim = 4\n"
        << "[train]\n"
        << "lr = 0.001\nbatch = 2\nlocal_steps = 1\nrounds = 2\n"
        << "lambda1 = 0.3\nlambda2 = 0.3\nlambda3 = 0.3\nmu = 0.5\nseed = 5\n"
        << "test_fraction = 0.25\npretrain_steps = 2\neval_every = 1\n"
        << "[serq]\nenabled = true\nbatches_per_round = 1\nlr = 0.001\n"
        << "[indicator]\nkind = text_hash\n"
        << "[transport]\nmode = in_process\nport = 0\n"
        << "[data]\ndir = " << (root / "data").string() << "\nsynth_clips = 8\n"
        << "outfed_clips = 4\noutfed_seed = 77\n"
        << "[output]\ndir = " << (root / "runs").string() << "\n"
        << "[sites]\ncount = 2\n"
        << "[site.0]\ntext = This is the Local site A model and the surgery type is Nephrectomy\n"
        << "clips = 8\nseed = 101\n"
        << "[site.1]\ntext = This is the Local site B model and the surgery type is Prostatectomy\n"
        << "clips = 8\nseed = 202\n";
    return ini.str();
}

struct TempTree {
    fs::path root;
    TempTree() {
        root = fs::temp_directory_path() /
               ("fedst_runner_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(root);
    }
    ~TempTree() { fs::remove_all(root); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("config parsing and validation") {
    TempTree tmp;
    RunConfig rc = RunConfig::from_kv(KvConfig::parse(tiny_ini(tmp.root)));
    REQUIRE(rc.sites.size() == 2);
    REQUIRE(rc.model.pool_sizes == std::vector<int>{2, 2, 1});
    REQUIRE(rc.sites[1].text.find("Prostatectomy") != std::string::npos);
    REQUIRE(rc.rounds == 2);

    SECTION("bad values are config errors") {
        std::string bad = tiny_ini(tmp.root);
        REQUIRE_THROWS_AS(KvConfig::parse("[x\nkey = 1\n"), ConfigError);
        REQUIRE_THROWS_AS(KvConfig::parse("just a line\n"), ConfigError);
        KvConfig kv = KvConfig::parse(bad + "\n[train]\nmu = 1.5\n");
        REQUIRE_THROWS_AS(RunConfig::from_kv(kv), ConfigError);
        KvConfig kv2 = KvConfig::parse(bad + "\n[train]\nbatch = zero\n");
        REQUIRE_THROWS_AS(RunConfig::from_kv(kv2), ConfigError);
        KvConfig kv3 = KvConfig::parse(bad + "\n[model]\nwindow = 3\n");
        REQUIRE_THROWS_AS(RunConfig::from_kv(kv3), ConfigError);
    }
}

TEST_CASE("checkpoint round-trip") {
    ModelConfig mc;
    mc.in_h = mc.in_w = 8;
    mc.in_ch = 2;
    mc.patch = 2;
    mc.channels = 4;
    mc.window = 2;
    mc.pool_sizes = {2, 1};
    mc.recept_fields = {};
    mc.indicator_dim = 4;
    Checkpoint ck;
    ck.model = mc;
    ck.params = build_model_params(mc, 9);
    ck.indicator = build_indicator(IndicatorKind::Gaussian, "", 1, 0, 4);
    ck.site_id = 3;

    const Bytes b = encode_checkpoint(ck);
    Checkpoint back = decode_checkpoint(b);
    REQUIRE(back.site_id == 3);
    REQUIRE(back.params.values_equal(ck.params));
    REQUIRE(back.indicator.xi.data() == ck.indicator.xi.data());
    REQUIRE(back.params.private_paths() == ck.params.private_paths());
    REQUIRE(encode_checkpoint(back) == b);

    Bytes corrupt = b;
    corrupt[20] ^= 0xFF;
    REQUIRE_THROWS_AS(decode_checkpoint(corrupt), DataError);
}

TEST_CASE("gen writes K+2 files deterministically and respects --force") {
    TempTree tmp;
    RunConfig rc = RunConfig::from_kv(KvConfig::parse(tiny_ini(tmp.root)));

    const auto paths = cmd_gen(rc, false);
    REQUIRE(paths.size() == rc.sites.size() + 2);
    for (const auto& p : paths) REQUIRE(fs::exists(p));

    // refuses overwrite without force
    REQUIRE_THROWS_AS(cmd_gen(rc, false), ConfigError);

    // force-regeneration is bit-identical
    const std::string before = slurp(rc.site_dataset_path(0));
    cmd_gen(rc, true);
    REQUIRE(slurp(rc.site_dataset_path(0)) == before);

    Dataset synth = load_dataset(rc.synth_dataset_path());
    REQUIRE(synth.frames_per_clip == 1);
    Dataset outfed = load_dataset(rc.outfed_dataset_path());
    REQUIRE(outfed.frames_per_clip == rc.model.frames());
    REQUIRE(outfed.meta == "out_of_federation");
}

TEST_CASE("run emits a reproducible run directory") {
    TempTree tmp;
    RunConfig rc = RunConfig::from_kv(KvConfig::parse(tiny_ini(tmp.root)));
    cmd_gen(rc, false);

    RunOutput fedst_run = cmd_run(rc, Method::FedST);
    REQUIRE(fs::exists(fedst_run.run_dir + "/config.snapshot.ini"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/metrics.csv"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/curve.svg"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/site_0.ckpt"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/site_1.ckpt"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/global.ckpt"));
    REQUIRE(fs::exists(fedst_run.run_dir + "/run_info.txt"));

    const std::string csv = slurp(fedst_run.metrics_csv_path);
    REQUIRE(csv.rfind("run_id,round,site,class,dice,iou,hd95,assd\n", 0) == 0);
    REQUIRE(csv.find("fedst-s5,0,site0,0,") != std::string::npos);
    REQUIRE(csv.find(",site1,mean,") != std::string::npos);

    SECTION("rerun from the snapshot is byte-identical") {
        RunConfig snap = RunConfig::from_kv(
            KvConfig::load(fedst_run.run_dir + "/config.snapshot.ini"));
        RunOutput again = cmd_run(snap, Method::FedST, (tmp.root / "rerun").string());
        REQUIRE(slurp(again.metrics_csv_path) == csv);
    }
    SECTION("local method moves zero bytes") {
        RunOutput local = cmd_run(rc, Method::LocalOnly);
        REQUIRE(local.result.message_bytes == 0);
        const std::string info = slurp(local.run_dir + "/run_info.txt");
        REQUIRE(info.find("message_bytes=0") != std::string::npos);
    }
    SECTION("eval of a site checkpoint on its test split matches the logged final round") {
        EvalRequest req;
        req.checkpoint = fedst_run.run_dir + "/site_0.ckpt";
        req.dataset_path = rc.site_dataset_path(0);
        req.site = 0;
        req.test_fraction = rc.test_fraction;
        MetricAccumulator acc = cmd_eval(req);
        const auto& logged = fedst_run.result.rounds.back().per_site[0];
        REQUIRE(acc.row(acc.classes()).dice == logged.row(logged.classes()).dice);
        REQUIRE(acc.row(acc.classes()).iou == logged.row(logged.classes()).iou);
    }
    SECTION("global merge evaluates on the out-of-federation set") {
        EvalRequest req;
        req.checkpoint = fedst_run.run_dir;
        req.dataset_path = rc.outfed_dataset_path();
        req.global_merge = true;
        MetricAccumulator acc = cmd_eval(req);
        REQUIRE(acc.row(acc.classes()).dice >= 0.0);
        REQUIRE(acc.row(acc.classes()).dice <= 1.0);
    }
    SECTION("missing checkpoint is a clear error") {
        EvalRequest req;
        req.checkpoint = fedst_run.run_dir + "/site_9.ckpt";
        req.dataset_path = rc.site_dataset_path(0);
        REQUIRE_THROWS_AS(cmd_eval(req), ConfigError);
    }
}

TEST_CASE("ablation toggles") {
    TempTree tmp;
    RunConfig rc = RunConfig::from_kv(KvConfig::parse(tiny_ini(tmp.root)));
    cmd_gen(rc, false);

    SECTION("serq off runs zero server steps") {
        LoadedData data = load_run_data(rc);
        std::vector<const Dataset*> ptrs;
        for (const auto& d : data.sites) ptrs.push_back(&d);
        FedResult with = run_federation(rc.engine_config(), ptrs, &data.synth);
        REQUIRE(with.server_steps > 0);
        FedResult without =
            run_federation(apply_toggle(rc.engine_config(), "serq"), ptrs, &data.synth);
        REQUIRE(without.server_steps == 0);
    }
    SECTION("one table row per requested configuration") {
        const auto rows = cmd_ablate(rc, {"ts", "serq"});
        REQUIRE(rows.size() == 3);
        REQUIRE(rows[0].name == "full");
        REQUIRE(rows[1].name == "no-ts");
        REQUIRE(rows[2].name == "no-serq");
        const std::string table = ablation_table(rows);
        REQUIRE(table.find("config,site0,site1,avg,out_of_fed") == 0);
        REQUIRE(std::count(table.begin(), table.end(), '\n') == 4);
    }
    SECTION("unknown toggle is a config error") {
        REQUIRE_THROWS_AS(apply_toggle(rc.engine_config(), "bogus"), ConfigError);
    }
}
