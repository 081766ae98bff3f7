#pragma once

// Dataset ingestion and the synthetic toy dataset.
//
// Layout on disk: <root>/{source,target}/<clip>/<nnnnnn>.png with zero-padded
// numeric frame names. An optional <root>/source_test split holds held-out
// source clips for evaluation. Gaps in the frame numbering split a directory
// into multiple clips.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "roma/embedding.hpp"
#include "roma/errors.hpp"
#include "roma/png_io.hpp"
#include "roma/random.hpp"

namespace roma {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct Clip {
    std::string name;      // directory name (shared by parts split on gaps)
    int start_index = 0;   // numeric index of the first frame
    std::vector<fs::path> frames;

    int length() const { return static_cast<int>(frames.size()); }
};

struct ClipManifest {
    std::string domain; // "source" or "target"
    std::vector<Clip> clips;

    int total_frames() const {
        int n = 0;
        for (const Clip& c : clips) n += c.length();
        return n;
    }
};

struct DatasetLayout {
    std::string source_dir = "source";
    std::string target_dir = "target";
    std::string source_test_dir = "source_test";
};

namespace detail {

inline std::optional<long> numeric_stem(const fs::path& p) {
    std::string s = p.stem().string();
    if (s.empty()) return std::nullopt;
    for (char c : s)
        if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    try {
        return std::stol(s);
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace detail

// Scans one domain directory. Frames sort by numeric index, clips by name;
// non-contiguous indices split a directory into several clips (with a warning).
inline ClipManifest scan_domain(const fs::path& dir, const std::string& domain) {
    if (!fs::exists(dir) || !fs::is_directory(dir))
        throw DatasetError("dataset: missing domain directory " + dir.string());
    std::vector<fs::path> clip_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) clip_dirs.push_back(e.path());
    std::sort(clip_dirs.begin(), clip_dirs.end());

    ClipManifest manifest;
    manifest.domain = domain;
    for (const fs::path& cd : clip_dirs) {
        std::vector<std::pair<long, fs::path>> frames;
        for (const auto& e : fs::directory_iterator(cd)) {
            if (!e.is_regular_file() || e.path().extension() != ".png") continue;
            if (auto idx = detail::numeric_stem(e.path()))
                frames.emplace_back(*idx, e.path());
        }
        std::sort(frames.begin(), frames.end());
        if (frames.empty()) continue;

        Clip current;
        current.name = cd.filename().string();
        current.start_index = static_cast<int>(frames[0].first);
        long prev = frames[0].first - 1;
        for (const auto& [idx, path] : frames) {
            if (!current.frames.empty() && idx != prev + 1) {
                std::cerr << "warning: non-contiguous frame indices in " << cd.string()
                          << " (gap before " << idx << "); splitting clip\n";
                manifest.clips.push_back(std::move(current));
                current = Clip{};
                current.name = cd.filename().string();
                current.start_index = static_cast<int>(idx);
            }
            current.frames.push_back(path);
            prev = idx;
        }
        manifest.clips.push_back(std::move(current));
    }
    if (manifest.clips.empty())
        throw DatasetError("dataset: no clips with frames under " + dir.string());
    return manifest;
}

inline std::pair<ClipManifest, ClipManifest> scan_dataset(const fs::path& root,
                                                          const DatasetLayout& layout = {}) {
    ClipManifest source = scan_domain(root / layout.source_dir, "source");
    ClipManifest target = scan_domain(root / layout.target_dir, "target");
    return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Toy dataset
// ---------------------------------------------------------------------------

// Moving rectangles and disks with linear, wall-bouncing motion. The source
// domain renders them thermal-style (bright blurred shapes on a dark
// background, intensity inversely tied to shape identity); the target domain
// renders independently seeded dynamics as flat colors on a light background.

struct ToyShape {
    bool disk = false;
    double cx0 = 0, cy0 = 0; // initial center
    double vx = 0, vy = 0;   // pixels per frame
    double half_w = 0, half_h = 0;
    int identity = 0;
};

struct ToyScene {
    std::vector<ToyShape> shapes;
    int size = 64;
};

struct ToyParams {
    int clips = 2;
    int frames_per_clip = 24;
    int size = 64;
    std::uint64_t seed = 0;
    int test_clips = 1; // held-out source clips under source_test/
};

inline ToyScene toy_scene(std::uint64_t domain_seed, int clip_index, int size) {
    Rng rng(mix_seed(domain_seed, static_cast<std::uint64_t>(clip_index)));
    ToyScene scene;
    scene.size = size;
    int n = 3;
    for (int i = 0; i < n; ++i) {
        ToyShape s;
        s.disk = rng.uniform() < 0.5;
        s.cx0 = rng.uniform(0.25 * size, 0.75 * size);
        s.cy0 = rng.uniform(0.25 * size, 0.75 * size);
        double speed = rng.uniform(0.8, 2.2);
        double angle = rng.uniform(0.0, 6.28318530717958647692);
        s.vx = speed * std::cos(angle);
        s.vy = speed * std::sin(angle);
        s.half_w = rng.uniform(0.08 * size, 0.16 * size);
        s.half_h = s.disk ? s.half_w : rng.uniform(0.08 * size, 0.16 * size);
        s.identity = i;
        scene.shapes.push_back(s);
    }
    return scene;
}

namespace detail {

// reflect p0 + v*t into [lo, hi] (triangle wave)
inline double bounce(double p0, double v, double t, double lo, double hi) {
    double span = hi - lo;
    double u = std::fmod(p0 - lo + v * t, 2.0 * span);
    if (u < 0) u += 2.0 * span;
    return lo + (u < span ? u : 2.0 * span - u);
}

inline void gaussian_blur(Frame& f, double sigma, int radius) {
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (double& k : kernel) k /= s;
    Frame tmp = f;
    for (int c = 0; c < f.channels; ++c) {
        for (int y = 0; y < f.height; ++y)
            for (int x = 0; x < f.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    int xx = std::clamp(x + i, 0, f.width - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] * f.at(c, y, xx);
                }
                tmp.at(c, y, x) = acc;
            }
        for (int y = 0; y < f.height; ++y)
            for (int x = 0; x < f.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    int yy = std::clamp(y + i, 0, f.height - 1);
                    acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(c, yy, x);
                }
                f.at(c, y, x) = acc;
            }
    }
}

} // namespace detail

// axis-aligned bounds of one shape at frame t: {x0, y0, x1, y1} inclusive
inline std::array<int, 4> toy_shape_bbox(const ToyShape& s, int t, int size) {
    double margin = std::max(s.half_w, s.half_h) + 1.0;
    double cx = detail::bounce(s.cx0, s.vx, t, margin, size - margin);
    double cy = detail::bounce(s.cy0, s.vy, t, margin, size - margin);
    return {std::max(0, static_cast<int>(std::floor(cx - s.half_w)) - 1),
            std::max(0, static_cast<int>(std::floor(cy - s.half_h)) - 1),
            std::min(size - 1, static_cast<int>(std::ceil(cx + s.half_w)) + 1),
            std::min(size - 1, static_cast<int>(std::ceil(cy + s.half_h)) + 1)};
}

inline constexpr int kToyBlurRadius = 3;

inline Frame render_toy_frame(const ToyScene& scene, int t, bool thermal) {
    int size = scene.size;
    int n = static_cast<int>(scene.shapes.size());
    Frame f;
    if (thermal) {
        f = Frame::make(size, size, 1, -0.85);
    } else {
        f = Frame::make(size, size, 3);
        const double bg[3] = {0.72, 0.76, 0.8};
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) f.at(c, y, x) = bg[c];
    }
    static const double palette[][3] = {
        {0.6, -0.5, -0.5}, {-0.5, 0.4, -0.6}, {-0.4, -0.4, 0.7},
        {0.5, 0.5, -0.6},  {-0.6, 0.5, 0.5},
    };
    for (const ToyShape& s : scene.shapes) {
        double margin = std::max(s.half_w, s.half_h) + 1.0;
        double cx = detail::bounce(s.cx0, s.vx, t, margin, size - margin);
        double cy = detail::bounce(s.cy0, s.vy, t, margin, size - margin);
        // brighter for lower identity
        double heat = 0.95 - 0.55 * (n > 1 ? static_cast<double>(s.identity) / (n - 1) : 0.0);
        const double* color = palette[s.identity % 5];
        for (int y = std::max(0, static_cast<int>(cy - s.half_h - 1));
             y <= std::min(size - 1, static_cast<int>(cy + s.half_h + 1)); ++y)
            for (int x = std::max(0, static_cast<int>(cx - s.half_w - 1));
                 x <= std::min(size - 1, static_cast<int>(cx + s.half_w + 1)); ++x) {
                bool inside;
                if (s.disk) {
                    double dx = (x - cx) / s.half_w, dy = (y - cy) / s.half_h;
                    inside = dx * dx + dy * dy <= 1.0;
                } else {
                    inside = std::abs(x - cx) <= s.half_w && std::abs(y - cy) <= s.half_h;
                }
                if (!inside) continue;
                if (thermal)
                    f.at(0, y, x) = heat;
                else
                    for (int c = 0; c < 3; ++c) f.at(c, y, x) = color[c];
            }
    }
    if (thermal) detail::gaussian_blur(f, 1.2, kToyBlurRadius);
    for (double& v : f.chw) v = std::clamp(v, -1.0, 1.0);
    return f;
}

namespace detail {

inline std::string frame_name(int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.png", idx);
    return buf;
}

inline void write_toy_domain(const fs::path& dir, std::uint64_t domain_seed, int clips,
                             int frames, int size, bool thermal) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    for (int c = 0; c < clips; ++c) {
        char name[16];
        std::snprintf(name, sizeof(name), "clip%03d", c);
        fs::path clip_dir = dir / name;
        fs::create_directories(clip_dir, ec);
        if (ec) throw DatasetError("make_toy_dataset: cannot create " + clip_dir.string());
        ToyScene scene = toy_scene(domain_seed, c, size);
        for (int t = 0; t < frames; ++t)
            write_png(clip_dir / frame_name(t), render_toy_frame(scene, t, thermal));
    }
}

} // namespace detail

inline void make_toy_dataset(const fs::path& out_root, const ToyParams& p) {
    if (p.clips <= 0 || p.frames_per_clip <= 0 || p.size < 16)
        throw ArgumentError("make_toy_dataset: clips, frames and size must be positive (size >= 16)");
    detail::write_toy_domain(out_root / "source", mix_seed(p.seed, 0x736F7572ull),
                             p.clips, p.frames_per_clip, p.size, true);
    detail::write_toy_domain(out_root / "target", mix_seed(p.seed, 0x74617267ull),
                             p.clips, p.frames_per_clip, p.size, false);
    if (p.test_clips > 0)
        detail::write_toy_domain(out_root / "source_test", mix_seed(p.seed, 0x74657374ull),
                                 p.test_clips, p.frames_per_clip, p.size, true);
}

// ---------------------------------------------------------------------------
// Fragment sampling
// ---------------------------------------------------------------------------

// Run of delta_t + 1 consecutive frames from one clip.
struct VideoFragment {
    int clip_index = 0;
    int start = 0; // 0-based offset within the clip
    std::vector<fs::path> paths;
    std::vector<Frame> frames;

    int length() const { return static_cast<int>(frames.size()); }
};

// Uniform over all valid (clip, start) pairs of the source manifest, with
// independently sampled target frames for the discriminator. Deterministic
// given the seed; the engine state can be checkpointed.
class FragmentSampler {
public:
    struct Batch {
        VideoFragment fragment;
        std::vector<fs::path> target_paths;
        std::vector<Frame> target_frames;
    };

    FragmentSampler(ClipManifest source, ClipManifest target, int delta_t, std::uint64_t seed)
        : source_(std::move(source)), target_(std::move(target)), delta_t_(delta_t),
          rng_(mix_seed(seed, 0x46524147)) {
        if (delta_t_ < 0) throw ArgumentError("fragment_iter: delta_t must be >= 0");
        for (std::size_t c = 0; c < source_.clips.size(); ++c) {
            int starts = source_.clips[c].length() - delta_t_;
            if (starts > 0) {
                eligible_.emplace_back(static_cast<int>(c), starts);
                total_starts_ += starts;
            }
        }
        if (total_starts_ == 0)
            throw DatasetError("fragment_iter: no source clip has at least " +
                               std::to_string(delta_t_ + 1) + " frames");
        for (std::size_t c = 0; c < target_.clips.size(); ++c)
            total_target_frames_ += target_.clips[c].length();
        if (total_target_frames_ == 0) throw DatasetError("fragment_iter: target domain is empty");
    }

    Batch next() {
        Batch b;
        long r = static_cast<long>(rng_.uniform_int(0, static_cast<int>(total_starts_) - 1));
        for (const auto& [clip, starts] : eligible_) {
            if (r < starts) {
                b.fragment.clip_index = clip;
                b.fragment.start = static_cast<int>(r);
                break;
            }
            r -= starts;
        }
        const Clip& clip = source_.clips[static_cast<std::size_t>(b.fragment.clip_index)];
        for (int i = 0; i <= delta_t_; ++i) {
            const fs::path& p = clip.frames[static_cast<std::size_t>(b.fragment.start + i)];
            b.fragment.paths.push_back(p);
            b.fragment.frames.push_back(read_png(p));
        }
        for (int i = 0; i <= delta_t_; ++i) {
            long t = static_cast<long>(rng_.uniform_int(0, static_cast<int>(total_target_frames_) - 1));
            for (const Clip& tc : target_.clips) {
                if (t < tc.length()) {
                    b.target_paths.push_back(tc.frames[static_cast<std::size_t>(t)]);
                    break;
                }
                t -= tc.length();
            }
            b.target_frames.push_back(read_png(b.target_paths.back()));
        }
        return b;
    }

    const ClipManifest& source() const { return source_; }
    const ClipManifest& target() const { return target_; }

    std::string save_rng() const { return rng_.save_state(); }
    void load_rng(const std::string& s) { rng_.load_state(s); }

private:
    ClipManifest source_, target_;
    int delta_t_;
    Rng rng_;
    std::vector<std::pair<int, int>> eligible_; // (clip index, valid start count)
    long total_starts_ = 0;
    long total_target_frames_ = 0;
};

} // namespace roma
