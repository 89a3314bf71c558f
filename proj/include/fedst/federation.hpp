#pragma once

#include <future>
#include <memory>
#include <string>
#include <vector>

#include "fedst/dataset.hpp"
#include "fedst/metrics.hpp"
#include "fedst/model.hpp"
#include "fedst/optim.hpp"
#include "fedst/transport.hpp"
#include "fedst/wire.hpp"

namespace fedst {

// Federated protocol engine: per-site local training, shared-parameter
// aggregation, server-side synthetic-feature quantification, plus the
// federated-averaging and local-only baselines. One round is: every site runs
// E optimizer steps and uploads its shared parameters; the server averages
// them, runs its synthetic phase, and redistributes; sites reload and are
// evaluated. All randomness derives from the run seed, so sequential and
// site-parallel execution produce identical results.

struct FedEngineConfig {
    ModelConfig model;
    int rounds = 10;      // communication rounds T
    int local_steps = 20; // local updates per round E
    int batch = 2;
    double lr = 1e-3;
    double lambda2 = 0.3;
    double lambda3 = 0.3;
    double mu = 0.5;
    bool serq = true;
    int serq_batches = 4; // synthetic batches per server phase per round
    double serq_lr = 1e-3;
    int pretrain_steps = 50;
    double pretrain_lr = 1e-3;
    std::uint64_t seed = 1;
    bool all_shared = false;           // federated-averaging partition
    bool freeze_server_private = false; // optionally pin the server's private
                                        // part at its pretrained values during
                                        // the synchronization phase
    bool weighted_aggregation = false;
    bool prompt = true;               // textual indicator vs zero vector
    IndicatorKind indicator_kind = IndicatorKind::TextHash;
    ForwardFlags flags;
    double test_fraction = 0.25;
    int eval_every = 1;
    int parallel_sites = 1;
    std::vector<std::string> site_texts;
    std::string server_text = "This is the global server model and the surgery type is synthetic";
};

struct SiteState {
    int site_id = 0;
    ParamTree model;
    AdamW opt;
    Indicator indicator;
    const Dataset* data = nullptr;
    Split split;
    std::unique_ptr<BatchIterator> train_iter;
    PayloadMap last_gamma; // most recently received shared parameters
};

struct ServerState {
    ParamTree global_model; // complete runnable model; its private part is
                            // frozen at the pretrained values
    ParamTree pretrained;
    Tensor domain_descriptor; // learnable, feature-shaped
    Tensor ema_feature;       // moving average of global features
    AdamW opt_pre;            // steps pretrained model + descriptor
    AdamW opt_global;
    Indicator indicator;
    const Dataset* synth = nullptr;
    std::unique_ptr<BatchIterator> synth_iter;
    int round = 0;
};

struct RoundMetrics {
    int round = 0;
    std::vector<MetricAccumulator> per_site;
};

struct FedResult {
    ModelConfig model_cfg;
    std::vector<ParamTree> site_models;
    std::vector<Indicator> site_indicators;
    std::vector<int> site_sample_counts;
    ParamTree global_model;
    Indicator server_indicator;
    ParamTree pretrained;
    std::vector<RoundMetrics> rounds;
    std::uint64_t message_bytes = 0;
    std::uint64_t server_steps = 0;
};

// ---- building blocks -------------------------------------------------------

/// Mean segmentation loss over a batch of clips (current-frame masks).
/// `spatial` selects the single-frame path used by the pretrained model.
inline Tensor batch_seg_loss(const ModelConfig& cfg, const WindowGeometry& geo, ParamTree& tree,
                             const Dataset& ds, const std::vector<int>& batch,
                             const Indicator& ind, const ForwardFlags& flags,
                             bool spatial = false) {
    Tensor acc = Tensor::scalar(0.0);
    for (int idx : batch) {
        const Clip& clip = ds.clips.at(static_cast<std::size_t>(idx));
        ForwardOut out = spatial
                             ? forward_spatial(cfg, geo, tree, clip.frames.back(), ind, flags)
                             : forward_full(cfg, geo, tree, clip.frames, ind, flags);
        acc = add(acc, seg_loss(cfg, out.logits, clip.masks.back(), cfg.lambda1));
    }
    return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

/// Batch-mean post-selection feature; graph-connected when a tape is active.
inline Tensor batch_mean_feature(const ModelConfig& cfg, const WindowGeometry& geo,
                                 ParamTree& tree, const Dataset& ds,
                                 const std::vector<int>& batch, const Indicator& ind,
                                 bool spatial, const ForwardFlags& flags) {
    Tensor acc;
    bool first = true;
    for (int idx : batch) {
        const Clip& clip = ds.clips.at(static_cast<std::size_t>(idx));
        ForwardOut out = spatial
                             ? forward_spatial(cfg, geo, tree, clip.frames.back(), ind, flags)
                             : forward_full(cfg, geo, tree, clip.frames, ind, flags);
        acc = first ? out.feature : add(acc, out.feature);
        first = false;
    }
    return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

/// One local communication-round contribution: load the incoming shared
/// parameters, run E optimizer steps on the segmentation loss, emit the
/// updated shared parameters. Private parameters never leave the site.
inline RoundMessage local_round(const FedEngineConfig& cfg, const WindowGeometry& geo,
                                SiteState& site, const PayloadMap& gamma_in, int round) {
    const auto shared = site.model.shared_paths();
    std::set<std::string> incoming;
    for (const auto& [p, blob] : gamma_in) incoming.insert(p);
    if (incoming != shared)
        throw ProtocolError("site " + std::to_string(site.site_id) +
                            ": incoming shared-parameter paths do not match the partition");
    for (const auto& [p, blob] : gamma_in) {
        Tensor& t = site.model.at(p);
        if (blob.shape != t.shape())
            throw ProtocolError("shape drift on path " + p);
        t.data() = blob.values;
    }

    for (int step = 0; step < cfg.local_steps; ++step) {
        const std::vector<int> batch = site.train_iter->next();
        site.model.zero_grad();
        Tape tape;
        Tensor loss = batch_seg_loss(cfg.model, geo, site.model, *site.data, batch,
                                     site.indicator, cfg.flags);
        tape.backward(loss);
        site.opt.step(site.model);
    }

    RoundMessage msg;
    msg.direction = Direction::SiteToServer;
    msg.round = static_cast<std::uint32_t>(round);
    msg.site_id = static_cast<std::uint32_t>(site.site_id);
    msg.sample_count = static_cast<std::uint32_t>(site.split.train.size());
    msg.payload = payload_from_tree(site.model, ParamRole::Shared);
    return msg;
}

namespace detail {

// Pairwise tree reduction; with inputs pre-sorted by site the result is
// independent of arrival order, bit for bit.
inline std::vector<double> pairwise_weighted_sum(std::vector<std::vector<double>> terms) {
    while (terms.size() > 1) {
        std::vector<std::vector<double>> next;
        for (std::size_t i = 0; i + 1 < terms.size(); i += 2) {
            for (std::size_t j = 0; j < terms[i].size(); ++j) terms[i][j] += terms[i + 1][j];
            next.push_back(std::move(terms[i]));
        }
        if (terms.size() % 2 == 1) next.push_back(std::move(terms.back()));
        terms = std::move(next);
    }
    return std::move(terms.front());
}

} // namespace detail

/// Per-path mean of uploaded shared parameters. Uniform weights by default;
/// the weighted mode uses message sample counts.
inline PayloadMap aggregate(std::vector<RoundMessage> messages, int expected_sites,
                            bool weighted = false) {
    if (static_cast<int>(messages.size()) != expected_sites)
        throw ProtocolError("aggregate: expected " + std::to_string(expected_sites) +
                            " messages, got " + std::to_string(messages.size()));
    std::sort(messages.begin(), messages.end(),
              [](const RoundMessage& a, const RoundMessage& b) { return a.site_id < b.site_id; });
    double total_weight = 0.0;
    for (int k = 0; k < expected_sites; ++k) {
        const RoundMessage& m = messages[static_cast<std::size_t>(k)];
        if (static_cast<int>(m.site_id) != k)
            throw ProtocolError("aggregate: missing message from site " + std::to_string(k));
        if (m.round != messages.front().round)
            throw ProtocolError("aggregate: round skew between sites");
        if (m.direction != Direction::SiteToServer)
            throw ProtocolError("aggregate: wrong message direction");
        if (m.payload.size() != messages.front().payload.size())
            throw ProtocolError("aggregate: payload path sets differ");
        total_weight += weighted ? static_cast<double>(m.sample_count) : 1.0;
    }
    if (weighted && total_weight <= 0.0) throw ProtocolError("aggregate: zero total weight");

    PayloadMap out;
    for (const auto& [path, first_blob] : messages.front().payload) {
        std::vector<std::vector<double>> terms;
        terms.reserve(messages.size());
        for (const RoundMessage& m : messages) {
            auto it = m.payload.find(path);
            if (it == m.payload.end() || it->second.shape != first_blob.shape)
                throw ProtocolError("aggregate: path mismatch at " + path);
            const double w =
                (weighted ? static_cast<double>(m.sample_count) : 1.0) / total_weight;
            std::vector<double> term = it->second.values;
            for (double& v : term) v *= w;
            terms.push_back(std::move(term));
        }
        out.emplace(path, TensorBlob{first_blob.shape, detail::pairwise_weighted_sum(std::move(terms))});
    }
    return out;
}

/// Join aggregated shared parameters with the server's own private part.
inline void assemble_global(ParamTree& global_model, const PayloadMap& gamma) {
    std::set<std::string> incoming;
    for (const auto& [p, blob] : gamma) incoming.insert(p);
    if (incoming != global_model.shared_paths())
        throw ProtocolError("assemble_global: shared path set mismatch");
    for (const auto& [p, blob] : gamma) {
        Tensor& t = global_model.at(p);
        if (blob.shape != t.shape()) throw ProtocolError("assemble_global: shape drift at " + p);
        t.data() = blob.values;
    }
}

/// Exact convex combination (1-mu) * prev + mu * next.
inline Tensor ema_update(const Tensor& prev, const Tensor& next, double mu) {
    if (prev.shape() != next.shape())
        throw DimensionError("ema_update: shape mismatch " + shape_str(prev.shape()) + " vs " +
                             shape_str(next.shape()));
    Tensor out(prev.shape());
    for (std::size_t i = 0; i < out.data().size(); ++i)
        out.data()[i] = (1.0 - mu) * prev.data()[i] + mu * next.data()[i];
    return out;
}

/// Untaped I = F_sy - D_sy reconstruction from the current pretrained model.
inline Tensor synth_instrument_feature(const FedEngineConfig& cfg, const WindowGeometry& geo,
                                       ServerState& server, const std::vector<int>& batch) {
    Tensor f_sy = batch_mean_feature(cfg.model, geo, server.pretrained, *server.synth, batch,
                                     server.indicator, /*spatial=*/true, cfg.flags);
    Tensor out(f_sy.shape());
    for (std::size_t i = 0; i < out.data().size(); ++i)
        out.data()[i] = f_sy.data()[i] - server.domain_descriptor.data()[i];
    return out;
}

/// Explicit-quantification step: with the global model fixed, update the
/// pretrained model and the domain descriptor so that the synthetic feature
/// minus the descriptor tracks the EMA of global features. `seg_weight`
/// scales the segmentation term (1 in normal operation).
inline void serq_eq_step(const FedEngineConfig& cfg, const WindowGeometry& geo,
                         ServerState& server, const std::vector<int>& batch,
                         double seg_weight = 1.0) {
    if (server.domain_descriptor.shape() != server.ema_feature.shape())
        throw ContractError("serq: descriptor/EMA shape drift");
    server.pretrained.zero_grad();
    server.domain_descriptor.zero_grad();
    {
        Tape tape;
        Tensor f_sy = batch_mean_feature(cfg.model, geo, server.pretrained, *server.synth, batch,
                                         server.indicator, /*spatial=*/true, cfg.flags);
        Tensor quant = mse_mean(sub(f_sy, server.domain_descriptor), server.ema_feature);
        Tensor loss = scale(quant, cfg.lambda2);
        if (seg_weight != 0.0) {
            Tensor seg = batch_seg_loss(cfg.model, geo, server.pretrained, *server.synth, batch,
                                        server.indicator, cfg.flags, /*spatial=*/true);
            loss = add(loss, scale(seg, seg_weight));
        }
        tape.backward(loss);
    }
    server.opt_pre.step(server.pretrained);
    server.opt_pre.step_tensor("domain_descriptor", server.domain_descriptor);
}

/// Convergence-synchronization step: with the pretrained model and descriptor
/// fixed, update the global model toward the reconstructed synthetic
/// instrument feature. The whole global model trains by default; only its
/// shared part ever reaches the sites. freeze_server_private instead pins the
/// server's private part at the pretrained values.
inline void serq_sc_step(const FedEngineConfig& cfg, const WindowGeometry& geo,
                         ServerState& server, const std::vector<int>& batch) {
    Tensor target = synth_instrument_feature(cfg, geo, server, batch);
    server.global_model.zero_grad();
    {
        Tape tape;
        Tensor seg = batch_seg_loss(cfg.model, geo, server.global_model, *server.synth, batch,
                                    server.indicator, cfg.flags);
        Tensor f_g = batch_mean_feature(cfg.model, geo, server.global_model, *server.synth,
                                        batch, server.indicator, /*spatial=*/false, cfg.flags);
        Tensor loss = add(seg, scale(mse_mean(f_g, target), cfg.lambda3));
        tape.backward(loss);
    }
    if (cfg.freeze_server_private) {
        ParamTree& global = server.global_model;
        server.opt_global.step(global, [&global](const std::string& path) {
            return global.role(path) == ParamRole::Shared;
        });
    } else {
        server.opt_global.step(server.global_model);
    }
}

/// Full server phase for one round: EMA refresh from global features, then
/// the quantification and synchronization passes over synthetic batches.
inline void server_round(const FedEngineConfig& cfg, const WindowGeometry& geo,
                         ServerState& server) {
    {
        const std::vector<int> batch = server.synth_iter->next();
        Tensor f_g = batch_mean_feature(cfg.model, geo, server.global_model, *server.synth,
                                        batch, server.indicator, /*spatial=*/false, cfg.flags);
        server.ema_feature = ema_update(server.ema_feature, f_g, cfg.mu);
    }
    for (int i = 0; i < cfg.serq_batches; ++i)
        serq_eq_step(cfg, geo, server, server.synth_iter->next());
    for (int i = 0; i < cfg.serq_batches; ++i)
        serq_sc_step(cfg, geo, server, server.synth_iter->next());
}

// ---- evaluation -------------------------------------------------------------

inline MaskView predict_mask(const ModelConfig& cfg, const WindowGeometry& geo, ParamTree& tree,
                             const Clip& clip, const Indicator& ind, const ForwardFlags& flags) {
    ForwardOut out = forward_full(cfg, geo, tree, clip.frames, ind, flags);
    const int hw = cfg.in_h * cfg.in_w, nc = cfg.classes;
    MaskView pred(static_cast<std::size_t>(hw), 0);
    for (int i = 0; i < hw; ++i) {
        int best = 0;
        double best_v = out.logits.data()[static_cast<std::size_t>(i) * nc];
        for (int k = 1; k < nc; ++k) {
            const double v = out.logits.data()[static_cast<std::size_t>(i) * nc + k];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        pred[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return pred;
}

inline MetricAccumulator eval_model(const ModelConfig& cfg, const WindowGeometry& geo,
                                    ParamTree& tree, const Dataset& ds,
                                    const std::vector<int>& indices, const Indicator& ind,
                                    const ForwardFlags& flags) {
    MetricAccumulator acc(cfg.classes);
    for (int idx : indices) {
        const Clip& clip = ds.clips.at(static_cast<std::size_t>(idx));
        const MaskView pred = predict_mask(cfg, geo, tree, clip, ind, flags);
        acc.add(evaluate_masks(pred, clip.masks.back(), cfg.in_h, cfg.in_w, cfg.classes));
    }
    return acc;
}

// ---- orchestration ----------------------------------------------------------

namespace detail {

inline Indicator site_indicator(const FedEngineConfig& cfg, int site_id) {
    if (!cfg.prompt) return zero_indicator(cfg.model.indicator_dim);
    const std::string text = site_id < static_cast<int>(cfg.site_texts.size())
                                 ? cfg.site_texts[static_cast<std::size_t>(site_id)]
                                 : "This is the Local site " + std::to_string(site_id) + " model";
    return build_indicator(cfg.indicator_kind, text, site_id, cfg.seed, cfg.model.indicator_dim);
}

inline ParamTree pretrain(const FedEngineConfig& cfg, const WindowGeometry& geo,
                          const Dataset* synth, const Indicator& ind) {
    ParamTree tree = build_model_params(cfg.model, cfg.seed);
    if (cfg.pretrain_steps <= 0) return tree;
    if (!synth) throw ConfigError("pretraining requested but no synthetic dataset given");
    std::vector<int> all(synth->clips.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    BatchIterator it(all, cfg.batch, Rng(cfg.seed).fork(888).next_u64());
    AdamW opt(AdamConfig{.lr = cfg.pretrain_lr});
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        const std::vector<int> batch = it.next();
        tree.zero_grad();
        Tape tape;
        Tensor loss = batch_seg_loss(cfg.model, geo, tree, *synth, batch, ind, cfg.flags,
                                     /*spatial=*/true);
        tape.backward(loss);
        opt.step(tree);
    }
    tree.zero_grad();
    return tree;
}

} // namespace detail

/// The full protocol. `site_data` holds one dataset per site; `synth` backs
/// pretraining and the server phase. A null transport selects an in-process
/// queue. Baselines reuse this loop: the averaging baseline is the all-shared
/// partition with the server phase disabled.
inline FedResult run_federation(FedEngineConfig cfg, const std::vector<const Dataset*>& site_data,
                                const Dataset* synth, Transport* transport = nullptr) {
    cfg.model.validate();
    const int n_sites = static_cast<int>(site_data.size());
    if (n_sites == 0) throw ConfigError("no sites configured");
    if (cfg.serq && !synth) throw ConfigError("server phase requires a synthetic dataset");
    const WindowGeometry geo = compute_window_geometry(cfg.model);

    std::unique_ptr<Transport> owned_transport;
    if (!transport) {
        owned_transport = std::make_unique<InProcessQueueTransport>(n_sites);
        transport = owned_transport.get();
    }

    // pretraining initializes every party
    Indicator server_ind =
        cfg.prompt ? build_indicator(cfg.indicator_kind, cfg.server_text, n_sites, cfg.seed,
                                     cfg.model.indicator_dim, 0.1)
                   : zero_indicator(cfg.model.indicator_dim);
    ParamTree pre = detail::pretrain(cfg, geo, synth, server_ind);
    if (cfg.all_shared) pre.repartition({});

    ServerState server;
    server.pretrained = pre.clone();
    server.global_model = pre.clone();
    server.indicator = server_ind;
    const Shape feat_shape{cfg.model.feat_h(), cfg.model.feat_w(), cfg.model.channels};
    {
        Rng drng = Rng(cfg.seed).fork(777);
        server.domain_descriptor = Tensor::randn(feat_shape, drng, 0.01, true);
    }
    server.ema_feature = Tensor(feat_shape);
    server.opt_pre = AdamW(AdamConfig{.lr = cfg.serq_lr});
    server.opt_global = AdamW(AdamConfig{.lr = cfg.serq_lr});
    server.synth = synth;
    if (cfg.serq) {
        std::vector<int> all(synth->clips.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        server.synth_iter = std::make_unique<BatchIterator>(
            all, cfg.batch, Rng(cfg.seed).fork(999).next_u64());
    }

    std::vector<SiteState> sites(static_cast<std::size_t>(n_sites));
    for (int k = 0; k < n_sites; ++k) {
        SiteState& s = sites[static_cast<std::size_t>(k)];
        s.site_id = k;
        s.model = pre.clone();
        s.opt = AdamW(AdamConfig{.lr = cfg.lr});
        s.indicator = detail::site_indicator(cfg, k);
        s.data = site_data[static_cast<std::size_t>(k)];
        s.split = split_dataset(static_cast<int>(s.data->clips.size()), cfg.test_fraction);
        s.train_iter = std::make_unique<BatchIterator>(
            s.split.train, cfg.batch, Rng(cfg.seed).fork(1000 + static_cast<std::uint64_t>(k)).next_u64());
        s.last_gamma = payload_from_tree(s.model, ParamRole::Shared);
    }
    const std::set<std::string> shared_set = pre.shared_paths();

    FedResult result;
    result.model_cfg = cfg.model;

    for (int t = 0; t < cfg.rounds; ++t) {
        // local phase
        auto site_work = [&](int k) {
            SiteState& s = sites[static_cast<std::size_t>(k)];
            try {
                RoundMessage msg = local_round(cfg, geo, s, s.last_gamma, t);
                transport->send_to_server(k, encode_message(msg, shared_set));
            } catch (const Error& e) {
                throw ProtocolError("round " + std::to_string(t) + " aborted: site " +
                                    std::to_string(k) + " failed: " + e.what());
            }
        };
        if (cfg.parallel_sites > 1) {
            std::vector<std::future<void>> futs;
            for (int k = 0; k < n_sites; ++k)
                futs.push_back(std::async(std::launch::async, site_work, k));
            for (auto& f : futs) f.get();
        } else {
            for (int k = 0; k < n_sites; ++k) site_work(k);
        }

        // server phase
        std::vector<RoundMessage> msgs;
        for (int k = 0; k < n_sites; ++k) {
            RoundMessage m = decode_message(transport->recv_at_server(k));
            if (m.round != static_cast<std::uint32_t>(t))
                throw ProtocolError("round skew: expected " + std::to_string(t));
            msgs.push_back(std::move(m));
        }
        PayloadMap gamma = aggregate(std::move(msgs), n_sites, cfg.weighted_aggregation);
        assemble_global(server.global_model, gamma);
        if (cfg.serq) {
            server_round(cfg, geo, server);
            result.server_steps +=
                static_cast<std::uint64_t>(cfg.serq_batches) * 2u;
        }
        server.round = t + 1;

        // distribute the (possibly server-refined) shared parameters
        const PayloadMap gamma_out = payload_from_tree(server.global_model, ParamRole::Shared);
        for (int k = 0; k < n_sites; ++k) {
            RoundMessage down;
            down.direction = Direction::ServerToSite;
            down.round = static_cast<std::uint32_t>(t);
            down.site_id = static_cast<std::uint32_t>(k);
            down.sample_count = 0;
            down.payload = gamma_out;
            transport->send_to_site(k, encode_message(down, shared_set));
        }
        for (int k = 0; k < n_sites; ++k) {
            SiteState& s = sites[static_cast<std::size_t>(k)];
            RoundMessage m = decode_message(transport->recv_at_site(k));
            if (m.direction != Direction::ServerToSite ||
                m.round != static_cast<std::uint32_t>(t))
                throw ProtocolError("bad distribution message at site " + std::to_string(k));
            s.last_gamma = std::move(m.payload);
            for (const auto& [p, blob] : s.last_gamma) {
                Tensor& dst = s.model.at(p);
                if (blob.shape != dst.shape())
                    throw ProtocolError("distributed parameter shape drift at " + p);
                dst.data() = blob.values;
            }
        }

        // evaluation on the merged models
        if (cfg.eval_every > 0 && (t % cfg.eval_every == 0 || t == cfg.rounds - 1)) {
            RoundMetrics rm;
            rm.round = t;
            for (int k = 0; k < n_sites; ++k) {
                SiteState& s = sites[static_cast<std::size_t>(k)];
                rm.per_site.push_back(eval_model(cfg.model, geo, s.model, *s.data, s.split.test,
                                                 s.indicator, cfg.flags));
            }
            result.rounds.push_back(std::move(rm));
        }
    }

    for (auto& s : sites) {
        result.site_models.push_back(std::move(s.model));
        result.site_indicators.push_back(s.indicator);
        result.site_sample_counts.push_back(static_cast<int>(s.split.train.size()));
    }
    result.global_model = std::move(server.global_model);
    result.server_indicator = server.indicator;
    result.pretrained = std::move(server.pretrained);
    result.message_bytes = transport->bytes_sent();
    return result;
}

/// Federated averaging: every parameter shared, server phase off.
inline FedResult run_fedavg(FedEngineConfig cfg, const std::vector<const Dataset*>& site_data,
                            const Dataset* synth, Transport* transport = nullptr) {
    cfg.all_shared = true;
    cfg.serq = false;
    return run_federation(std::move(cfg), site_data, synth, transport);
}

/// Independent per-site training; no transport is ever constructed. The loop
/// mirrors the federated schedule (T rounds of E steps with evaluation) so
/// trajectories are directly comparable.
inline FedResult run_local_only(FedEngineConfig cfg,
                                const std::vector<const Dataset*>& site_data,
                                const Dataset* synth) {
    cfg.model.validate();
    const int n_sites = static_cast<int>(site_data.size());
    if (n_sites == 0) throw ConfigError("no sites configured");
    const WindowGeometry geo = compute_window_geometry(cfg.model);

    Indicator server_ind =
        cfg.prompt ? build_indicator(cfg.indicator_kind, cfg.server_text, n_sites, cfg.seed,
                                     cfg.model.indicator_dim, 0.1)
                   : zero_indicator(cfg.model.indicator_dim);
    ParamTree pre = detail::pretrain(cfg, geo, synth, server_ind);
    if (cfg.all_shared) pre.repartition({});

    std::vector<SiteState> sites(static_cast<std::size_t>(n_sites));
    for (int k = 0; k < n_sites; ++k) {
        SiteState& s = sites[static_cast<std::size_t>(k)];
        s.site_id = k;
        s.model = pre.clone();
        s.opt = AdamW(AdamConfig{.lr = cfg.lr});
        s.indicator = detail::site_indicator(cfg, k);
        s.data = site_data[static_cast<std::size_t>(k)];
        s.split = split_dataset(static_cast<int>(s.data->clips.size()), cfg.test_fraction);
        s.train_iter = std::make_unique<BatchIterator>(
            s.split.train, cfg.batch, Rng(cfg.seed).fork(1000 + static_cast<std::uint64_t>(k)).next_u64());
    }

    FedResult result;
    result.model_cfg = cfg.model;
    for (int t = 0; t < cfg.rounds; ++t) {
        for (int k = 0; k < n_sites; ++k) {
            SiteState& s = sites[static_cast<std::size_t>(k)];
            for (int step = 0; step < cfg.local_steps; ++step) {
                const std::vector<int> batch = s.train_iter->next();
                s.model.zero_grad();
                Tape tape;
                Tensor loss = batch_seg_loss(cfg.model, geo, s.model, *s.data, batch,
                                             s.indicator, cfg.flags);
                tape.backward(loss);
                s.opt.step(s.model);
            }
        }
        if (cfg.eval_every > 0 && (t % cfg.eval_every == 0 || t == cfg.rounds - 1)) {
            RoundMetrics rm;
            rm.round = t;
            for (int k = 0; k < n_sites; ++k) {
                SiteState& s = sites[static_cast<std::size_t>(k)];
                rm.per_site.push_back(eval_model(cfg.model, geo, s.model, *s.data, s.split.test,
                                                 s.indicator, cfg.flags));
            }
            result.rounds.push_back(std::move(rm));
        }
    }
    for (auto& s : sites) {
        result.site_models.push_back(std::move(s.model));
        result.site_indicators.push_back(s.indicator);
        result.site_sample_counts.push_back(static_cast<int>(s.split.train.size()));
    }
    result.global_model = pre.clone();
    result.server_indicator = server_ind;
    result.pretrained = std::move(pre);
    return result;
}

/// Merge personalized models into one inference model by weighted averaging
/// of the full trees (indicators averaged with the same weights).
inline std::pair<ParamTree, Indicator> merge_site_models(const FedResult& result,
                                                         bool weighted = true) {
    if (result.site_models.empty()) throw ContractError("no site models to merge");
    const std::size_t n = result.site_models.size();
    std::vector<double> w(n, 1.0);
    if (weighted)
        for (std::size_t k = 0; k < n; ++k)
            w[k] = static_cast<double>(result.site_sample_counts.at(k));
    double total = 0.0;
    for (double v : w) total += v;
    for (double& v : w) v /= total;

    ParamTree merged = result.site_models.front().clone();
    for (auto& [path, t] : merged.entries()) {
        std::vector<std::vector<double>> terms;
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<double> term = result.site_models[k].at(path).data();
            for (double& v : term) v *= w[k];
            terms.push_back(std::move(term));
        }
        t.data() = detail::pairwise_weighted_sum(std::move(terms));
    }
    Indicator ind = result.site_indicators.front();
    ind.xi = Tensor(ind.xi.shape());
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < ind.xi.data().size(); ++i)
            ind.xi.data()[i] += w[k] * result.site_indicators[k].xi.data()[i];
    return {std::move(merged), std::move(ind)};
}

} // namespace fedst
