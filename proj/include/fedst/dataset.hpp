#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fedst/binio.hpp"
#include "fedst/rng.hpp"
#include "fedst/tensor.hpp"

namespace fedst {

// Procedural "surgical" scenes: site-specific band-limited background
// textures under shared moving instruments built from three analytic parts
// (shaft bar, wrist disc, jaw wedge pair). Masks are rendered from the same
// geometry predicates as the pixels, so label/render consistency is exact.

constexpr int kClassCount = 4; // 0 background, 1 shaft, 2 wrist, 3 jaw

struct SceneSpec {
    int site_id = 0;
    // Background texture family: per-site frequency band (cycles per image)
    // and contrast/level ranges.
    double freq_lo = 1.5, freq_hi = 3.0;
    double amp_lo = 0.22, amp_hi = 0.40;
    double base_lo = 0.35, base_hi = 0.55;
    int max_instruments = 2; // 1..max per clip
    int height = 56, width = 56, channels = 3;
    int frames = 4;
    double max_speed = 2.5; // px per frame
    double max_spin = 0.12; // rad per frame
    bool flat_shading = false;
    double pixel_noise = 0.02;
    std::uint64_t seed = 1;
    std::string meta;
};

/// Background texture families: pairwise-disjoint frequency bands with their
/// contrast ranges. Sites 0..3 are the federated families; 4 is held out for
/// the out-of-federation site and is noticeably higher-contrast, so models
/// keyed to seen textures degrade there while shape- and motion-driven ones
/// transfer.
inline void apply_background_band(SceneSpec& spec, int family) {
    static const double bands[][4] = {
        // freq_lo, freq_hi, amp_lo, amp_hi
        {1.5, 3.0, 0.22, 0.40},
        {4.0, 6.5, 0.22, 0.40},
        {7.5, 10.0, 0.22, 0.40},
        {11.0, 14.0, 0.22, 0.40},
        {16.0, 20.0, 0.22, 0.40},
    };
    if (family < 0) throw ConfigError("background family must be non-negative");
    const int idx = family < 5 ? family : 4;
    spec.freq_lo = bands[idx][0];
    spec.freq_hi = bands[idx][1];
    spec.amp_lo = bands[idx][2];
    spec.amp_hi = bands[idx][3];
    if (family >= 5) {
        spec.freq_lo = 16.0 + 5.0 * (family - 4);
        spec.freq_hi = spec.freq_lo + 4.0;
    }
}

struct Clip {
    std::vector<Tensor> frames;                   // each [h, w, ch]
    std::vector<std::vector<std::uint8_t>> masks; // per frame, h*w labels
};

struct Dataset {
    int frames_per_clip = 0;
    int height = 0, width = 0, channels = 0;
    int classes = kClassCount;
    std::string meta;
    std::vector<Clip> clips;
};

namespace scene {

struct Instrument {
    double ax = 0, ay = 0, theta = 0; // anchor (wrist centre) and heading
    double vx = 0, vy = 0, spin = 0;  // per-frame motion
    double shaft_len = 0, shaft_w = 0, wrist_r = 0;
    double jaw_len = 0, jaw_w = 0, jaw_angle = 0;
    double shade = 0; // per-instrument brightness offset
};

// Instrument geometry is drawn from one distribution shared by all sites.
inline Instrument draw_instrument(const SceneSpec& spec, Rng& rng) {
    Instrument in;
    in.ax = rng.uniform(0.30, 0.70) * spec.width;
    in.ay = rng.uniform(0.30, 0.70) * spec.height;
    in.theta = rng.uniform(0.0, 6.283185307179586);
    const double speed = rng.uniform(0.6, spec.max_speed);
    const double dir = rng.uniform(0.0, 6.283185307179586);
    in.vx = speed * std::cos(dir);
    in.vy = speed * std::sin(dir);
    in.spin = rng.uniform(-spec.max_spin, spec.max_spin);
    in.shaft_len = rng.uniform(16.0, 24.0);
    in.shaft_w = rng.uniform(4.0, 6.5);
    in.wrist_r = rng.uniform(3.0, 5.0);
    in.jaw_len = rng.uniform(6.0, 10.0);
    in.jaw_w = rng.uniform(2.0, 3.2);
    in.jaw_angle = rng.uniform(0.18, 0.45);
    in.shade = spec.flat_shading ? 0.0 : rng.uniform(-0.05, 0.05);
    return in;
}

// Part label at pixel centre (x, y) for frame t; 0 when outside.
inline int label_at(const Instrument& in, int t, double x, double y) {
    const double ax = in.ax + in.vx * t, ay = in.ay + in.vy * t;
    const double th = in.theta + in.spin * t;
    const double dx = x - ax, dy = y - ay;
    const double lon = dx * std::cos(th) + dy * std::sin(th);
    const double lat = -dx * std::sin(th) + dy * std::cos(th);

    for (double sign : {1.0, -1.0}) { // jaws sit on top
        const double a = sign * in.jaw_angle;
        const double jlon = lon * std::cos(a) + lat * std::sin(a);
        const double jlat = -lon * std::sin(a) + lat * std::cos(a);
        const double start = 0.3 * in.wrist_r;
        if (jlon >= start && jlon <= start + in.jaw_len && std::fabs(jlat) <= in.jaw_w * 0.5)
            return 3;
    }
    if (lon * lon + lat * lat <= in.wrist_r * in.wrist_r) return 2;
    const double tail = -(0.5 * in.wrist_r + in.shaft_len);
    if (lon >= tail && lon <= -0.5 * in.wrist_r && std::fabs(lat) <= in.shaft_w * 0.5) return 1;
    return 0;
}

struct BackgroundField {
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    double base[3];
    double amp;

    double value(double x, double y, int w, int h) const {
        double v = 0.0;
        for (const auto& wv : waves)
            v += wv.amp * std::sin(6.283185307179586 * (wv.fx * x / w + wv.fy * y / h) + wv.phase);
        return v;
    }
};

inline BackgroundField draw_background(const SceneSpec& spec, Rng& rng) {
    BackgroundField bg;
    const int n_waves = 6;
    bg.amp = rng.uniform(spec.amp_lo, spec.amp_hi);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n_waves));
    for (int i = 0; i < n_waves; ++i) {
        const double f = rng.uniform(spec.freq_lo, spec.freq_hi);
        const double dir = rng.uniform(0.0, 6.283185307179586);
        bg.waves.push_back({f * std::cos(dir), f * std::sin(dir),
                            rng.uniform(0.0, 6.283185307179586), bg.amp * norm});
    }
    const double base = rng.uniform(spec.base_lo, spec.base_hi);
    for (int ch = 0; ch < 3; ++ch) bg.base[ch] = base + rng.uniform(-0.04, 0.04);
    return bg;
}

} // namespace scene

/// One clip rendered deterministically from (spec, clip_index).
inline Clip generate_clip(const SceneSpec& spec, int clip_index) {
    Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(clip_index));
    const int h = spec.height, w = spec.width, ch = spec.channels;

    scene::BackgroundField bg = scene::draw_background(spec, rng);
    const int count =
        spec.max_instruments <= 1 ? 1 : rng.uniform_int(1, spec.max_instruments);
    std::vector<scene::Instrument> instruments;
    for (int i = 0; i < count; ++i) instruments.push_back(scene::draw_instrument(spec, rng));

    // metallic part colours, identical across sites
    static const double part_color[4][3] = {{0, 0, 0},
                                            {0.80, 0.78, 0.76},
                                            {0.94, 0.92, 0.88},
                                            {0.70, 0.72, 0.76}};

    Clip clip;
    for (int t = 0; t < spec.frames; ++t) {
        Tensor frame(Shape{h, w, ch});
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                int label = 0;
                double shade = 0.0;
                for (const auto& in : instruments) {
                    const int l = scene::label_at(in, t, px, py);
                    if (l > label) {
                        label = l;
                        shade = in.shade;
                    }
                }
                mask[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(label);
                for (int k = 0; k < ch; ++k) {
                    double v;
                    if (label > 0) {
                        v = part_color[label][k % 3] + shade;
                    } else {
                        v = bg.base[k % 3] + bg.value(px, py, w, h);
                    }
                    if (!spec.flat_shading && spec.pixel_noise > 0.0)
                        v += rng.uniform(-spec.pixel_noise, spec.pixel_noise);
                    frame.data()[(static_cast<std::size_t>(y) * w + x) * ch +
                                 static_cast<std::size_t>(k)] = std::min(1.0, std::max(0.0, v));
                }
            }
        clip.frames.push_back(std::move(frame));
        clip.masks.push_back(std::move(mask));
    }
    return clip;
}

/// Multi-frame clips for one federated site.
inline Dataset gen_site_dataset(const SceneSpec& spec, int n_clips) {
    if (n_clips <= 0) throw ConfigError("clip count must be positive");
    Dataset ds;
    ds.frames_per_clip = spec.frames;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.channels = spec.channels;
    ds.meta = spec.meta.empty() ? ("site=" + std::to_string(spec.site_id)) : spec.meta;
    for (int i = 0; i < n_clips; ++i) ds.clips.push_back(generate_clip(spec, i));
    return ds;
}

/// Simulator-style data: single-frame clips, flat shading, background family
/// far below every site band (explicit domain gap).
inline Dataset gen_synth_dataset(SceneSpec spec, int n_clips) {
    spec.frames = 1;
    spec.flat_shading = true;
    spec.pixel_noise = 0.0;
    spec.freq_lo = 0.2;
    spec.freq_hi = 0.5;
    spec.amp_lo = 0.03;
    spec.amp_hi = 0.08;
    if (spec.meta.empty()) spec.meta = "synthetic";
    return gen_site_dataset(spec, n_clips);
}

/// Held-out site: shared instrument distribution over an unseen background
/// family.
inline Dataset gen_out_of_fed_site(SceneSpec spec, int n_clips) {
    apply_background_band(spec, 4);
    if (spec.meta.empty()) spec.meta = "out_of_federation";
    return gen_site_dataset(spec, n_clips);
}

// ---- container file: magic "FSTD" ----------------------------------------

inline Bytes encode_dataset(const Dataset& ds) {
    ByteWriter wr;
    wr.put_bytes("FSTD", 4);
    wr.put_u16(1); // version
    wr.put_u32(static_cast<std::uint32_t>(ds.clips.size()));
    wr.put_u32(static_cast<std::uint32_t>(ds.frames_per_clip));
    wr.put_u32(static_cast<std::uint32_t>(ds.height));
    wr.put_u32(static_cast<std::uint32_t>(ds.width));
    wr.put_u32(static_cast<std::uint32_t>(ds.channels));
    wr.put_u32(static_cast<std::uint32_t>(ds.classes));
    wr.put_string(ds.meta);
    for (const Clip& clip : ds.clips) {
        for (const Tensor& f : clip.frames)
            for (double v : f.data()) wr.put_f64(v);
        for (const auto& m : clip.masks) wr.put_bytes(m.data(), m.size());
    }
    return wr.take();
}

inline Dataset decode_dataset(const Bytes& bytes) {
    ByteReader rd(bytes);
    const std::uint8_t* magic = rd.take(4);
    if (std::memcmp(magic, "FSTD", 4) != 0) throw DataError("not a dataset file");
    if (rd.get_u16() != 1) throw DataError("unsupported dataset version");
    Dataset ds;
    const std::uint32_t n_clips = rd.get_u32();
    ds.frames_per_clip = static_cast<int>(rd.get_u32());
    ds.height = static_cast<int>(rd.get_u32());
    ds.width = static_cast<int>(rd.get_u32());
    ds.channels = static_cast<int>(rd.get_u32());
    ds.classes = static_cast<int>(rd.get_u32());
    ds.meta = rd.get_string();
    const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
    for (std::uint32_t i = 0; i < n_clips; ++i) {
        Clip clip;
        for (int f = 0; f < ds.frames_per_clip; ++f) {
            Tensor frame(Shape{ds.height, ds.width, ds.channels});
            for (double& v : frame.data()) v = rd.get_f64();
            clip.frames.push_back(std::move(frame));
        }
        for (int f = 0; f < ds.frames_per_clip; ++f) {
            const std::uint8_t* p = rd.take(hw);
            clip.masks.emplace_back(p, p + hw);
        }
        ds.clips.push_back(std::move(clip));
    }
    if (!rd.done()) throw DataError("trailing bytes in dataset file");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    const Bytes b = encode_dataset(ds);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write dataset file: " + path);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out) throw DataError("short write on dataset file: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open dataset file: " + path);
    const std::streamsize n = in.tellg();
    in.seekg(0);
    Bytes b(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(b.data()), n);
    if (!in) throw DataError("short read on dataset file: " + path);
    return decode_dataset(b);
}

// ---- splits and batches ----------------------------------------------------

struct Split {
    std::vector<int> train, test;
};

/// Deterministic split: the last ceil(frac * n) clips are the test set.
inline Split split_dataset(int n_clips, double test_fraction) {
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw ConfigError("test fraction must be in [0, 1)");
    const int n_test = static_cast<int>(std::ceil(test_fraction * n_clips));
    Split s;
    for (int i = 0; i < n_clips - n_test; ++i) s.train.push_back(i);
    for (int i = n_clips - n_test; i < n_clips; ++i) s.test.push_back(i);
    if (s.train.empty()) throw ConfigError("split leaves no training clips");
    return s;
}

/// Deterministic epoch-shuffled batching over a fixed index set.
class BatchIterator {
public:
    BatchIterator(std::vector<int> indices, int batch_size, std::uint64_t seed)
        : indices_(std::move(indices)), batch_(batch_size), rng_(seed) {
        if (indices_.empty()) throw ContractError("batch iterator over empty index set");
        if (batch_ <= 0) throw ContractError("batch size must be positive");
        reshuffle();
    }

    std::vector<int> next() {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(batch_));
        for (int i = 0; i < batch_; ++i) {
            if (pos_ == indices_.size()) {
                ++epoch_;
                reshuffle();
                pos_ = 0;
            }
            out.push_back(indices_[pos_++]);
        }
        return out;
    }

    int epoch() const { return epoch_; }

private:
    void reshuffle() {
        Rng r = rng_.fork(static_cast<std::uint64_t>(epoch_));
        for (std::size_t i = indices_.size() - 1; i > 0; --i)
            std::swap(indices_[i], indices_[static_cast<std::size_t>(
                                       r.uniform_int(0, static_cast<int>(i)))]);
    }

    std::vector<int> indices_;
    int batch_;
    Rng rng_;
    std::size_t pos_ = 0;
    int epoch_ = 0;
};

} // namespace fedst
