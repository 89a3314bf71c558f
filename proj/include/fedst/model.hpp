#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedst/indicator.hpp"
#include "fedst/ops.hpp"
#include "fedst/param_tree.hpp"

namespace fedst {

/// Segmentation network geometry. The encoder embeds `patch` x `patch` input
/// blocks, so features live at (in_h/patch, in_w/patch, channels). Feature
/// dims must divide by the window size and by every pooling size.
struct ModelConfig {
    int in_h = 56;
    int in_w = 56;
    int in_ch = 3;
    int patch = 2;
    int channels = 16;
    int window = 7;
    // One pooling size per frame slot, oldest history first, current frame
    // last. The list length fixes the clip length the model consumes.
    std::vector<int> pool_sizes{7, 4, 2, 1};
    // Receptive fields per frame slot; recorded configuration only, the
    // temporal stage realizes multi-scale context through pool_sizes.
    std::vector<int> recept_fields{49, 20, 6, 7};
    int classes = 4;
    int indicator_dim = 16;
    double lambda1 = 0.3;

    int history() const { return static_cast<int>(pool_sizes.size()) - 1; }
    int frames() const { return static_cast<int>(pool_sizes.size()); }
    int feat_h() const { return in_h / patch; }
    int feat_w() const { return in_w / patch; }

    void validate() const {
        if (in_h <= 0 || in_w <= 0 || in_ch <= 0 || channels <= 0 || patch <= 0)
            throw ConfigError("model dims must be positive");
        if (pool_sizes.empty()) throw ConfigError("pool_sizes must name at least the current frame");
        if (classes < 2) throw ConfigError("need at least two classes");
        if (indicator_dim <= 0) throw ConfigError("indicator_dim must be positive");
        if (in_h % patch != 0 || in_w % patch != 0)
            throw ConfigError("input dims must divide by the patch size");
        if (feat_h() % window != 0 || feat_w() % window != 0)
            throw ConfigError("feature dims must divide by the window size");
        for (int p : pool_sizes)
            if (p <= 0 || feat_h() % p != 0 || feat_w() % p != 0)
                throw ConfigError("feature dims must divide by every pooling size");
        if (!recept_fields.empty() && recept_fields.size() != pool_sizes.size())
            throw ConfigError("recept_fields must match pool_sizes in length");
    }
};

/// Per-window token bookkeeping: which token-grid rows belong to each window
/// and, per frame slot, which pooled-grid cells overlap the window footprint.
/// Context assembly order is fixed: the window's own tokens from the current
/// frame's partition first, then past slots oldest to newest. Position bias
/// tables are laid out in that same key order.
struct WindowGeometry {
    int grid_h = 0, grid_w = 0; // windows per axis
    std::vector<std::vector<int>> window_tokens;              // [win][s*s]
    std::vector<std::vector<std::vector<int>>> context_cells; // [win][slot][cells]
    std::vector<int> context_len;                             // [win]
    std::vector<int> inverse_order; // token-grid row -> row in window-major concat

    int windows() const { return grid_h * grid_w; }
};

inline WindowGeometry compute_window_geometry(const ModelConfig& cfg) {
    const int h = cfg.feat_h(), w = cfg.feat_w(), s = cfg.window;
    WindowGeometry geo;
    geo.grid_h = h / s;
    geo.grid_w = w / s;
    const int nwin = geo.windows();
    geo.window_tokens.resize(static_cast<std::size_t>(nwin));
    geo.context_cells.resize(static_cast<std::size_t>(nwin));
    geo.context_len.assign(static_cast<std::size_t>(nwin), 0);
    geo.inverse_order.assign(static_cast<std::size_t>(h) * w, 0);

    const int m = cfg.history();
    for (int wi = 0; wi < geo.grid_h; ++wi)
        for (int wj = 0; wj < geo.grid_w; ++wj) {
            const int widx = wi * geo.grid_w + wj;
            auto& toks = geo.window_tokens[static_cast<std::size_t>(widx)];
            for (int a = 0; a < s; ++a)
                for (int b = 0; b < s; ++b) {
                    const int row = (wi * s + a) * w + (wj * s + b);
                    geo.inverse_order[static_cast<std::size_t>(row)] =
                        widx * s * s + a * s + b;
                    toks.push_back(row);
                }

            auto& cells = geo.context_cells[static_cast<std::size_t>(widx)];
            cells.resize(cfg.pool_sizes.size());
            int total = 0;
            // Own context from the current frame's partition, then history.
            std::vector<int> slot_order;
            slot_order.push_back(m);
            for (int j = 0; j < m; ++j) slot_order.push_back(j);
            for (int slot : slot_order) {
                const int p = cfg.pool_sizes[static_cast<std::size_t>(slot)];
                const int gw = w / p;
                auto& list = cells[static_cast<std::size_t>(slot)];
                const int r0 = wi * s, r1 = (wi + 1) * s;
                const int c0 = wj * s, c1 = (wj + 1) * s;
                for (int a = 0; a * p < h; ++a) {
                    if (a * p >= r1 || (a + 1) * p <= r0) continue;
                    for (int b = 0; b * p < w; ++b) {
                        if (b * p >= c1 || (b + 1) * p <= c0) continue;
                        list.push_back(a * gw + b);
                    }
                }
                total += static_cast<int>(list.size());
            }
            geo.context_len[static_cast<std::size_t>(widx)] = total;
        }
    return geo;
}

namespace detail {

inline std::string win_bias_path(int widx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rsc.bias.win%03d", widx);
    return buf;
}

inline void
insert_fc(ParamTree& tree, const std::string& prefix, int in, int out, Rng& rng, ParamRole role) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    tree.insert(prefix + ".w", Tensor::randn({in, out}, rng, stddev, true), role);
    tree.insert(prefix + ".b", Tensor(Shape{out}, 0.0, true), role);
}

} // namespace detail

/// Exactly the encoder self-attention query projection plus the channel
/// selection head (selection FC and indicator fusion) stay site-private.
inline bool default_private_path(const std::string& path) {
    return path.rfind("enc.attn.q.", 0) == 0 || path.rfind("select.", 0) == 0;
}

/// Freshly initialized parameter tree for one model instance.
inline ParamTree build_model_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = Rng(seed).fork(0xb0d7);
    const int c = cfg.channels;
    ParamTree tree;

    detail::insert_fc(tree, "embed", cfg.patch * cfg.patch * cfg.in_ch, c, rng, ParamRole::Shared);

    detail::insert_fc(tree, "enc.attn.q", c, c, rng, ParamRole::Private);
    detail::insert_fc(tree, "enc.attn.k", c, c, rng, ParamRole::Shared);
    detail::insert_fc(tree, "enc.attn.v", c, c, rng, ParamRole::Shared);
    detail::insert_fc(tree, "enc.attn.proj", c, c, rng, ParamRole::Shared);

    for (int j = 0; j < cfg.frames(); ++j) {
        const int p = cfg.pool_sizes[static_cast<std::size_t>(j)];
        detail::insert_fc(tree, "rsc.part." + std::to_string(j), p * p * c, c, rng,
                          ParamRole::Shared);
    }
    detail::insert_fc(tree, "rsc.attn.q", c, c, rng, ParamRole::Shared);
    detail::insert_fc(tree, "rsc.attn.k", c, c, rng, ParamRole::Shared);
    detail::insert_fc(tree, "rsc.attn.v", c, c, rng, ParamRole::Shared);

    const WindowGeometry geo = compute_window_geometry(cfg);
    const int s2 = cfg.window * cfg.window;
    for (int widx = 0; widx < geo.windows(); ++widx)
        tree.insert(detail::win_bias_path(widx),
                    Tensor(Shape{s2, geo.context_len[static_cast<std::size_t>(widx)]}, 0.0, true),
                    ParamRole::Shared);

    detail::insert_fc(tree, "select.fc", 2 * c, c, rng, ParamRole::Private);
    detail::insert_fc(tree, "select.ind", cfg.indicator_dim, c, rng, ParamRole::Private);

    detail::insert_fc(tree, "dec.fc1", c, c, rng, ParamRole::Shared);
    detail::insert_fc(tree, "dec.head", c + cfg.in_ch, cfg.classes, rng, ParamRole::Shared);
    return tree;
}

namespace detail {

inline Tensor fc(ParamTree& params, const std::string& prefix, Tensor x) {
    return fully_connected(std::move(x), params.at(prefix + ".w"), params.at(prefix + ".b"));
}

} // namespace detail

/// Per-frame feature extraction: patch embedding followed by windowed
/// self-attention with a residual connection. Each frame is encoded
/// independently; the query projection is the personalized part.
inline Tensor encode_frame(const ModelConfig& cfg, const WindowGeometry& geo, ParamTree& params,
                           const Tensor& frame) {
    if (frame.shape() != Shape{cfg.in_h, cfg.in_w, cfg.in_ch})
        throw DimensionError("encode_frame: frame shape " + shape_str(frame.shape()) +
                             " does not match config");
    const int c = cfg.channels;
    Tensor tok = detail::fc(params, "embed", space_to_patches(frame, cfg.patch));
    Tensor flat = reshape(tok, {cfg.feat_h() * cfg.feat_w(), c});

    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<Tensor> win_out;
    win_out.reserve(static_cast<std::size_t>(geo.windows()));
    for (int widx = 0; widx < geo.windows(); ++widx) {
        Tensor wtok = gather_rows(flat, geo.window_tokens[static_cast<std::size_t>(widx)]);
        Tensor q = detail::fc(params, "enc.attn.q", wtok);
        Tensor k = detail::fc(params, "enc.attn.k", wtok);
        Tensor v = detail::fc(params, "enc.attn.v", wtok);
        Tensor att = softmax_lastdim(scale(matmul_nt(q, k), inv_sqrt_c));
        Tensor mixed = detail::fc(params, "enc.attn.proj", matmul(att, v));
        win_out.push_back(add(mixed, wtok));
    }
    Tensor stacked = concat(win_out, 0);
    Tensor ordered = gather_rows(stacked, geo.inverse_order);
    return reshape(ordered, {cfg.feat_h(), cfg.feat_w(), c});
}

/// Multi-scale partition of one frame's features: p x p patches flattened and
/// projected back to the channel width (slot selects the projection and p).
inline Tensor partition_past(const ModelConfig& cfg, ParamTree& params, const Tensor& feat,
                             int slot) {
    if (slot < 0 || slot >= cfg.frames()) throw DimensionError("partition_past: bad frame slot");
    const int p = cfg.pool_sizes[static_cast<std::size_t>(slot)];
    return detail::fc(params, "rsc.part." + std::to_string(slot), space_to_patches(feat, p));
}

/// Windowed temporal cross-attention with residual. Queries come from the
/// current frame's window tokens; keys and values from the window's context
/// (own partition tokens plus co-located pooled history tokens). Pass
/// `attn_out` to capture the per-window attention maps.
inline Tensor rsc_temporal(const ModelConfig& cfg, const WindowGeometry& geo, ParamTree& params,
                           const Tensor& current, const std::vector<Tensor>& parts,
                           std::vector<Tensor>* attn_out = nullptr) {
    const int c = cfg.channels;
    if (static_cast<int>(parts.size()) != cfg.frames())
        throw DimensionError("rsc_temporal: expected one partition per frame slot");
    if (current.shape() != Shape{cfg.feat_h(), cfg.feat_w(), c})
        throw DimensionError("rsc_temporal: bad current feature shape");

    std::vector<Tensor> part_flat;
    part_flat.reserve(parts.size());
    for (int j = 0; j < cfg.frames(); ++j) {
        const int p = cfg.pool_sizes[static_cast<std::size_t>(j)];
        const Shape want{cfg.feat_h() / p, cfg.feat_w() / p, c};
        if (parts[static_cast<std::size_t>(j)].shape() != want)
            throw DimensionError("rsc_temporal: partition slot " + std::to_string(j) +
                                 " has shape " +
                                 shape_str(parts[static_cast<std::size_t>(j)].shape()) +
                                 ", expected " + shape_str(want));
        part_flat.push_back(
            reshape(parts[static_cast<std::size_t>(j)], {want[0] * want[1], c}));
    }

    Tensor flat = reshape(current, {cfg.feat_h() * cfg.feat_w(), c});
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
    const int m = cfg.history();

    std::vector<Tensor> win_out;
    win_out.reserve(static_cast<std::size_t>(geo.windows()));
    for (int widx = 0; widx < geo.windows(); ++widx) {
        const auto& cells = geo.context_cells[static_cast<std::size_t>(widx)];
        Tensor qtok = gather_rows(flat, geo.window_tokens[static_cast<std::size_t>(widx)]);

        std::vector<Tensor> ctx;
        ctx.push_back(gather_rows(part_flat[static_cast<std::size_t>(m)],
                                  cells[static_cast<std::size_t>(m)]));
        for (int j = 0; j < m; ++j)
            ctx.push_back(gather_rows(part_flat[static_cast<std::size_t>(j)],
                                      cells[static_cast<std::size_t>(j)]));
        Tensor context = concat(ctx, 0);

        Tensor q = detail::fc(params, "rsc.attn.q", qtok);
        Tensor k = detail::fc(params, "rsc.attn.k", context);
        Tensor v = detail::fc(params, "rsc.attn.v", context);
        Tensor scores =
            add(scale(matmul_nt(q, k), inv_sqrt_c), params.at(detail::win_bias_path(widx)));
        Tensor att = softmax_lastdim(scores);
        if (attn_out) attn_out->push_back(att);
        win_out.push_back(add(matmul(att, v), qtok));
    }
    Tensor stacked = concat(win_out, 0);
    Tensor ordered = gather_rows(stacked, geo.inverse_order);
    return reshape(ordered, {cfg.feat_h(), cfg.feat_w(), c});
}

/// Indicator-guided channel gate with a residual fallback:
/// out = F + F * sigmoid(FC(concat(avgpool(F), proj(indicator)))).
/// The indicator tensor is frozen and never receives a gradient.
inline Tensor channel_select(const ModelConfig& cfg, ParamTree& params, const Tensor& feat,
                             const Indicator& ind) {
    if (ind.xi.shape() != Shape{cfg.indicator_dim})
        throw DimensionError("channel_select: indicator dim mismatch");
    Tensor pooled = global_avgpool_hw(feat);
    Tensor fused = detail::fc(params, "select.ind", ind.xi);
    Tensor gate = sigmoid(detail::fc(params, "select.fc", concat({pooled, fused}, 0)));
    return add(feat, mul_channels(feat, gate));
}

/// Upsample back to input resolution and project to per-class logits. The
/// head sees the raw frame alongside the upsampled features (pixel skip), so
/// thin structures survive the patch-level bottleneck.
inline Tensor decode(const ModelConfig& cfg, ParamTree& params, const Tensor& feat,
                     const Tensor& frame) {
    if (frame.shape() != Shape{cfg.in_h, cfg.in_w, cfg.in_ch})
        throw DimensionError("decode: frame shape mismatch");
    Tensor x = relu(detail::fc(params, "dec.fc1", feat));
    Tensor up = upsample_nearest(x, cfg.patch);
    return detail::fc(params, "dec.head", concat({up, frame}, 2));
}

/// Combined objective: cross-entropy plus lambda1 times soft Dice, both
/// averaged over classes/pixels of the current frame.
inline Tensor seg_loss(const ModelConfig& cfg, const Tensor& logits,
                       const std::vector<std::uint8_t>& mask, double lambda1) {
    const int hw = cfg.in_h * cfg.in_w, nc = cfg.classes;
    if (logits.shape() != Shape{cfg.in_h, cfg.in_w, nc})
        throw DimensionError("seg_loss: logits shape mismatch");
    if (static_cast<int>(mask.size()) != hw) throw DimensionError("seg_loss: mask size mismatch");

    Tensor onehot(Shape{cfg.in_h, cfg.in_w, nc});
    std::vector<double> class_count(static_cast<std::size_t>(nc), 0.0);
    for (int i = 0; i < hw; ++i) {
        const int lab = mask[static_cast<std::size_t>(i)];
        if (lab >= nc)
            throw DataError("seg_loss: label " + std::to_string(lab) + " >= class count");
        onehot.data()[static_cast<std::size_t>(i) * nc + lab] = 1.0;
        class_count[static_cast<std::size_t>(lab)] += 1.0;
    }

    Tensor logp = log_softmax_lastdim(logits);
    Tensor ce = scale(sum_all(mul(onehot, logp)), -1.0 / static_cast<double>(hw));

    const double eps = 1e-6;
    Tensor probs = softmax_lastdim(logits);
    Tensor dice_sum = Tensor::scalar(0.0);
    for (int k = 0; k < nc; ++k) {
        Tensor pk = slice_lastdim(probs, k, 1);
        Tensor gk = slice_lastdim(onehot, k, 1);
        Tensor inter = sum_all(mul(pk, gk));
        Tensor denom = add_scalar(sum_all(pk), class_count[static_cast<std::size_t>(k)] + eps);
        Tensor dice_k = div(add_scalar(scale(inter, 2.0), eps), denom);
        dice_sum = add(dice_sum, dice_k);
    }
    Tensor dice_loss = sub(Tensor::scalar(1.0), scale(dice_sum, 1.0 / static_cast<double>(nc)));
    return add(ce, scale(dice_loss, lambda1));
}

struct ForwardFlags {
    bool temporal = true; // temporal cross-attention stage
    bool select = true;   // channel selection stage
};

struct ForwardOut {
    Tensor logits;  // [in_h, in_w, classes]
    Tensor feature; // post-selection current-frame feature [h, w, c]
};

/// Full pipeline on a clip. Clips shorter than the configured frame count are
/// padded by duplicating the current frame into the missing history slots.
inline ForwardOut forward_full(const ModelConfig& cfg, const WindowGeometry& geo,
                               ParamTree& params, const std::vector<Tensor>& clip_frames,
                               const Indicator& ind, const ForwardFlags& flags = {}) {
    if (clip_frames.empty()) throw DimensionError("forward: empty clip");
    if (static_cast<int>(clip_frames.size()) > cfg.frames())
        throw DimensionError("forward: clip longer than the configured frame count");

    std::vector<const Tensor*> slots(static_cast<std::size_t>(cfg.frames()));
    const int missing = cfg.frames() - static_cast<int>(clip_frames.size());
    const Tensor& current = clip_frames.back();
    for (int j = 0; j < cfg.frames(); ++j)
        slots[static_cast<std::size_t>(j)] =
            j < missing ? &current : &clip_frames[static_cast<std::size_t>(j - missing)];

    Tensor f_current;
    Tensor f_star;
    if (flags.temporal) {
        std::vector<Tensor> parts;
        parts.reserve(slots.size());
        for (int j = 0; j < cfg.frames(); ++j) {
            Tensor feat = encode_frame(cfg, geo, params, *slots[static_cast<std::size_t>(j)]);
            if (j == cfg.history()) f_current = feat;
            parts.push_back(partition_past(cfg, params, feat, j));
        }
        f_star = rsc_temporal(cfg, geo, params, f_current, parts);
    } else {
        f_star = encode_frame(cfg, geo, params, current);
    }

    Tensor selected = flags.select ? channel_select(cfg, params, f_star, ind) : f_star;
    ForwardOut out;
    out.feature = selected;
    out.logits = decode(cfg, params, selected, current);
    return out;
}

/// Single-frame spatial path: encoder, channel selection and decoder with the
/// temporal stage bypassed entirely.
inline ForwardOut forward_spatial(const ModelConfig& cfg, const WindowGeometry& geo,
                                  ParamTree& params, const Tensor& frame, const Indicator& ind,
                                  const ForwardFlags& flags = {}) {
    Tensor feat = encode_frame(cfg, geo, params, frame);
    Tensor selected = flags.select ? channel_select(cfg, params, feat, ind) : feat;
    ForwardOut out;
    out.feature = selected;
    out.logits = decode(cfg, params, selected, frame);
    return out;
}

} // namespace fedst
