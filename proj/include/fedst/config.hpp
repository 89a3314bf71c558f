#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedst/federation.hpp"

namespace fedst {

// Plain-text key-value configuration with [section] headers. Values run to
// the end of the line (trimmed); full-line comments start with '#'. No
// environment overrides: a run snapshot is the whole truth.

class KvConfig {
public:
    static KvConfig parse(const std::string& text) {
        KvConfig cfg;
        cfg.raw_ = text;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
                section = trim(t.substr(1, t.size() - 2));
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            cfg.values_[section.empty() ? key : section + "." + key] = value;
        }
        return cfg;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    const std::string& raw_text() const { return raw_; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long get_int(const std::string& key) const { return to_int(key, get_string(key)); }
    long get_int(const std::string& key, long fallback) const {
        return has(key) ? get_int(key) : fallback;
    }
    double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }
    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = get_string(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("key " + key + ": expected a boolean, got '" + v + "'");
    }
    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        std::istringstream ss(get_string(key));
        std::string item;
        while (std::getline(ss, item, ','))
            out.push_back(static_cast<int>(to_int(key, trim(item))));
        if (out.empty()) throw ConfigError("key " + key + ": empty list");
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return {};
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }
    static long to_int(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const long n = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return n;
        } catch (const std::exception&) {
            throw ConfigError("key " + key + ": expected an integer, got '" + v + "'");
        }
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return d;
        } catch (const std::exception&) {
            throw ConfigError("key " + key + ": expected a number, got '" + v + "'");
        }
    }

    std::string raw_;
    std::map<std::string, std::string> values_;
};

struct SiteConfig {
    int id = 0;
    std::string text;
    int clips = 16;
    std::uint64_t seed = 1;
};

/// Full experiment configuration: sites, model geometry, training schedule,
/// server phase, indicator, transport and output location.
struct RunConfig {
    std::vector<SiteConfig> sites;
    ModelConfig model;
    int rounds = 10;
    int local_steps = 10;
    int batch = 2;
    double lr = 1e-3;
    double lambda2 = 0.3, lambda3 = 0.3, mu = 0.5;
    std::uint64_t seed = 1;
    double test_fraction = 0.25;
    int pretrain_steps = 50;
    double pretrain_lr = 1e-3;
    int eval_every = 1;
    int parallel_sites = 1;
    bool serq_enabled = true;
    int serq_batches = 4;
    double serq_lr = 1e-3;
    bool serq_freeze_private = false;
    IndicatorKind indicator_kind = IndicatorKind::TextHash;
    TransportMode transport_mode = TransportMode::InProcessQueue;
    int transport_port = 0;
    std::string data_dir = "data";
    int synth_clips = 32;
    int outfed_clips = 8;
    std::uint64_t outfed_seed = 40001;
    std::string output_dir = "runs/out";
    std::string raw_text;

    static RunConfig from_kv(const KvConfig& kv) {
        RunConfig rc;
        rc.raw_text = kv.raw_text();

        rc.model.in_h = static_cast<int>(kv.get_int("model.h0", 56));
        rc.model.in_w = static_cast<int>(kv.get_int("model.w0", 56));
        rc.model.in_ch = static_cast<int>(kv.get_int("model.in_channels", 3));
        rc.model.patch = static_cast<int>(kv.get_int("model.patch", 2));
        rc.model.channels = static_cast<int>(kv.get_int("model.channels", 16));
        rc.model.window = static_cast<int>(kv.get_int("model.window", 7));
        if (kv.has("model.pools")) rc.model.pool_sizes = kv.get_int_list("model.pools");
        if (kv.has("model.recept_fields"))
            rc.model.recept_fields = kv.get_int_list("model.recept_fields");
        else if (rc.model.recept_fields.size() != rc.model.pool_sizes.size())
            rc.model.recept_fields.clear();
        rc.model.classes = static_cast<int>(kv.get_int("model.classes", 4));
        rc.model.indicator_dim = static_cast<int>(kv.get_int("model.indicator_dim", 16));
        rc.model.lambda1 = kv.get_double("train.lambda1", 0.3);

        rc.rounds = static_cast<int>(kv.get_int("train.rounds", 10));
        rc.local_steps = static_cast<int>(kv.get_int("train.local_steps", 10));
        rc.batch = static_cast<int>(kv.get_int("train.batch", 2));
        rc.lr = kv.get_double("train.lr", 1e-3);
        rc.lambda2 = kv.get_double("train.lambda2", 0.3);
        rc.lambda3 = kv.get_double("train.lambda3", 0.3);
        rc.mu = kv.get_double("train.mu", 0.5);
        rc.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 1));
        rc.test_fraction = kv.get_double("train.test_fraction", 0.25);
        rc.pretrain_steps = static_cast<int>(kv.get_int("train.pretrain_steps", 50));
        rc.pretrain_lr = kv.get_double("train.pretrain_lr", rc.lr);
        rc.eval_every = static_cast<int>(kv.get_int("train.eval_every", 1));
        rc.parallel_sites = static_cast<int>(kv.get_int("train.parallel_sites", 1));

        rc.serq_enabled = kv.get_bool("serq.enabled", true);
        rc.serq_batches = static_cast<int>(kv.get_int("serq.batches_per_round", 4));
        rc.serq_lr = kv.get_double("serq.lr", 1e-3);
        rc.serq_freeze_private = kv.get_bool("serq.freeze_private", false);

        rc.indicator_kind = indicator_kind_from_name(kv.get_string("indicator.kind", "text_hash"));
        rc.transport_mode = transport_mode_from_name(kv.get_string("transport.mode", "in_process"));
        rc.transport_port = static_cast<int>(kv.get_int("transport.port", 0));

        rc.data_dir = kv.get_string("data.dir", "data");
        rc.synth_clips = static_cast<int>(kv.get_int("data.synth_clips", 32));
        rc.outfed_clips = static_cast<int>(kv.get_int("data.outfed_clips", 8));
        rc.outfed_seed = static_cast<std::uint64_t>(kv.get_int("data.outfed_seed", 40001));
        rc.output_dir = kv.get_string("output.dir", "runs/out");

        const int n_sites = static_cast<int>(kv.get_int("sites.count"));
        for (int k = 0; k < n_sites; ++k) {
            const std::string prefix = "site." + std::to_string(k) + ".";
            SiteConfig sc;
            sc.id = k;
            sc.text = kv.get_string(prefix + "text",
                                    "This is the Local site " + std::to_string(k) + " model");
            sc.clips = static_cast<int>(kv.get_int(prefix + "clips", 16));
            sc.seed = static_cast<std::uint64_t>(kv.get_int(prefix + "seed", 1000 + k));
            rc.sites.push_back(std::move(sc));
        }
        rc.validate();
        return rc;
    }

    void validate() const {
        model.validate();
        if (sites.empty()) throw ConfigError("at least one site is required");
        if (rounds < 0 || local_steps < 0) throw ConfigError("rounds and local_steps must be >= 0");
        if (batch <= 0) throw ConfigError("batch must be positive");
        for (double l : {model.lambda1, lambda2, lambda3, mu})
            if (l < 0.0 || l > 1.0) throw ConfigError("lambda/mu values must lie in [0, 1]");
        if (test_fraction < 0.0 || test_fraction >= 1.0)
            throw ConfigError("test_fraction must lie in [0, 1)");
        if (serq_enabled && serq_batches <= 0)
            throw ConfigError("serq.batches_per_round must be positive");
        if (transport_port < 0 || transport_port > 65535)
            throw ConfigError("transport.port out of range");
        for (const auto& s : sites)
            if (s.clips < 2) throw ConfigError("each site needs at least 2 clips");
    }

    FedEngineConfig engine_config() const {
        FedEngineConfig fc;
        fc.model = model;
        fc.rounds = rounds;
        fc.local_steps = local_steps;
        fc.batch = batch;
        fc.lr = lr;
        fc.lambda2 = lambda2;
        fc.lambda3 = lambda3;
        fc.mu = mu;
        fc.serq = serq_enabled;
        fc.serq_batches = serq_batches;
        fc.serq_lr = serq_lr;
        fc.freeze_server_private = serq_freeze_private;
        fc.pretrain_steps = pretrain_steps;
        fc.pretrain_lr = pretrain_lr;
        fc.seed = seed;
        fc.indicator_kind = indicator_kind;
        fc.test_fraction = test_fraction;
        fc.eval_every = eval_every;
        fc.parallel_sites = parallel_sites;
        for (const auto& s : sites) fc.site_texts.push_back(s.text);
        return fc;
    }

    // dataset file locations
    std::string site_dataset_path(int k) const {
        return data_dir + "/site_" + std::to_string(k) + ".fstd";
    }
    std::string synth_dataset_path() const { return data_dir + "/synthetic.fstd"; }
    std::string outfed_dataset_path() const { return data_dir + "/out_of_fed.fstd"; }
};

} // namespace fedst
