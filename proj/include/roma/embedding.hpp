#pragma once

// Frames and region token extraction. Two extractor kinds share one
// interface: a frozen pretrained ViT (weights from disk) and a deterministic
// per-region surrogate used by tests and the toy pipeline. Both are
// differentiable with respect to the input frame.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "roma/autodiff.hpp"
#include "roma/errors.hpp"
#include "roma/random.hpp"
#include "roma/vit.hpp"

namespace roma {

// ---------------------------------------------------------------------------
// Frame
// ---------------------------------------------------------------------------

// Pixel values in [-1, 1], CHW storage. 1 channel for infrared, 3 for visible.
struct Frame {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> chw;

    static Frame make(int h, int w, int c, double fill = 0.0) {
        Frame f;
        f.height = h;
        f.width = w;
        f.channels = c;
        f.chw.assign(static_cast<std::size_t>(h) * w * c, fill);
        return f;
    }

    double& at(int c, int y, int x) {
        return chw[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return chw[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    bool valid() const {
        if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) return false;
        if (chw.size() != static_cast<std::size_t>(height) * width * channels) return false;
        for (double v : chw)
            if (!std::isfinite(v) || v < -1.0 || v > 1.0) return false;
        return true;
    }
};

inline ad::Var frame_to_var(const Frame& f) {
    return ad::Var::constant(Tensor::from({f.channels, f.height, f.width}, f.chw));
}

inline Frame var_to_frame(const ad::Var& v) {
    if (v.rank() != 3) throw ArgumentError("var_to_frame: expected CHW tensor");
    Frame f;
    f.channels = v.dim(0);
    f.height = v.dim(1);
    f.width = v.dim(2);
    f.chw = v.value().vec();
    return f;
}

// ---------------------------------------------------------------------------
// Extractor configuration
// ---------------------------------------------------------------------------

enum class ExtractorKind { Surrogate, PretrainedViT };

struct ExtractorSpec {
    ExtractorKind kind = ExtractorKind::Surrogate;
    int region_size = 16;
    int embed_dim = 64;        // surrogate only; the ViT dim comes from its weights
    std::uint64_t seed = 0;    // surrogate only
    std::string weights_path;  // pretrained only
    int input_size = 0;        // 0 = kind default (256 surrogate, 224 pretrained)

    int resolved_input_size() const {
        if (input_size > 0) return input_size;
        return kind == ExtractorKind::Surrogate ? 256 : 224;
    }
};

struct LayerSelection {
    std::vector<int> layer_ids;

    // non-empty, strictly increasing, all ids inside [0, num_layers)
    void validate(int num_layers) const {
        if (layer_ids.empty()) throw ConfigError("layer selection is empty");
        for (std::size_t i = 0; i < layer_ids.size(); ++i) {
            if (layer_ids[i] < 0 || layer_ids[i] >= num_layers)
                throw ConfigError("unknown extractor layer index " + std::to_string(layer_ids[i]));
            if (i > 0 && layer_ids[i] <= layer_ids[i - 1])
                throw ConfigError("layer selection must be strictly increasing");
        }
    }
};

// Per-layer grid of region token embeddings; row i is region i in raster order.
struct TokenGrid {
    ad::Var tokens; // [N_r, d]
    int grid_rows = 0;
    int grid_cols = 0;
    int layer_id = 0;

    int count() const { return grid_rows * grid_cols; }
    int dim() const { return tokens.dim(1); }
};

// Rectangular window in region-grid coordinates.
struct AreaSpec {
    int row0 = 0, col0 = 0, rows = 0, cols = 0;
};

inline TokenGrid select_area_tokens(const TokenGrid& grid, const AreaSpec& area) {
    if (area.rows <= 0 || area.cols <= 0 || area.row0 < 0 || area.col0 < 0 ||
        area.row0 + area.rows > grid.grid_rows || area.col0 + area.cols > grid.grid_cols)
        throw ArgumentError("select_area_tokens: area out of bounds");
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(area.rows) * area.cols);
    for (int r = 0; r < area.rows; ++r)
        for (int c = 0; c < area.cols; ++c)
            idx.push_back((area.row0 + r) * grid.grid_cols + (area.col0 + c));
    TokenGrid out;
    out.tokens = ad::gather_rows(grid.tokens, idx);
    out.grid_rows = area.rows;
    out.grid_cols = area.cols;
    out.layer_id = grid.layer_id;
    return out;
}

// ---------------------------------------------------------------------------
// Surrogate projection
// ---------------------------------------------------------------------------

inline constexpr int kSurrogateLayers = 4;

// P [in_dim, out_dim] (pre-transposed) and b [out_dim], drawn once per
// (layer_id, seed)
inline std::pair<Tensor, Tensor> make_surrogate_projection(int layer_id, std::uint64_t seed,
                                                           int in_dim, int out_dim) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(layer_id) + 0x5355524Cull));
    Tensor p({in_dim, out_dim});
    double stddev = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.normal(0.0, stddev);
    Tensor b({out_dim});
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.normal(0.0, 0.3);
    return {std::move(p), std::move(b)};
}

// tanh(P . region + b) for one flattened region; the projection depends only
// on (layer_id, seed), so repeated calls agree bit-for-bit
inline ad::Var surrogate_forward(const ad::Var& region_flat, int layer_id, std::uint64_t seed,
                                 int embed_dim) {
    if (layer_id < 0 || layer_id >= kSurrogateLayers)
        throw ConfigError("unknown extractor layer index " + std::to_string(layer_id));
    int in_dim = static_cast<int>(region_flat.value().size());
    auto [p, b] = make_surrogate_projection(layer_id, seed, in_dim, embed_dim);
    ad::Var row = region_flat.rank() == 2 ? region_flat : ad::reshape(region_flat, {1, in_dim});
    return ad::tanh_(ad::add_rowvec(ad::matmul(row, ad::Var::constant(p)), ad::Var::constant(b)));
}

// ---------------------------------------------------------------------------
// FeatureExtractor
// ---------------------------------------------------------------------------

// Frozen after construction; extraction is pure and safe to call from
// multiple threads.
class FeatureExtractor {
public:
    explicit FeatureExtractor(const ExtractorSpec& spec) : spec_(spec) {
        int s = spec_.resolved_input_size();
        if (spec_.region_size <= 0) throw ConfigError("extractor: region size must be positive");
        if (spec_.kind == ExtractorKind::Surrogate) {
            if (s % spec_.region_size != 0)
                throw ConfigError("extractor: region size must divide input size");
            if (spec_.embed_dim <= 0) throw ConfigError("extractor: embed dim must be positive");
            int in_dim = spec_.region_size * spec_.region_size * 3;
            for (int l = 0; l < kSurrogateLayers; ++l) {
                auto [p, b] = make_surrogate_projection(l, spec_.seed, in_dim, spec_.embed_dim);
                proj_.push_back(ad::Var::constant(std::move(p)));
                bias_.push_back(ad::Var::constant(std::move(b)));
            }
        } else {
            vit_ = std::make_shared<ViTBackbone>(ViTBackbone(ViTWeights::load(spec_.weights_path)));
            if (vit_->config().patch_size != spec_.region_size)
                throw ConfigError("extractor: region size does not match ViT patch size");
        }
    }

    const ExtractorSpec& spec() const { return spec_; }

    int num_layers() const {
        return spec_.kind == ExtractorKind::Surrogate ? kSurrogateLayers : vit_->config().depth;
    }

    int token_dim() const {
        return spec_.kind == ExtractorKind::Surrogate ? spec_.embed_dim : vit_->config().dim;
    }

    int grid_side() const {
        int s = spec_.kind == ExtractorKind::Surrogate ? spec_.resolved_input_size()
                                                       : vit_->config().image_size;
        return s / spec_.region_size;
    }

    // surrogate: all four pseudo-layers; ViT: four evenly spaced blocks ending
    // at the last one
    LayerSelection default_layers() const {
        int n = num_layers();
        LayerSelection sel;
        if (n <= 4) {
            for (int i = 0; i < n; ++i) sel.layer_ids.push_back(i);
        } else {
            for (int k = 1; k <= 4; ++k) sel.layer_ids.push_back(k * n / 4 - 1);
        }
        return sel;
    }

    // One grid per selected layer. The frame is resized to the working
    // resolution first and single-channel input is replicated to three
    // channels before entering the extractor.
    std::vector<TokenGrid> extract(const ad::Var& frame, const LayerSelection& layers) const {
        layers.validate(num_layers());
        if (frame.rank() != 3) throw ArgumentError("extract_tokens: frame must be CHW");
        int c = frame.dim(0);
        if (c != 1 && c != 3) throw ArgumentError("extract_tokens: frame must have 1 or 3 channels");
        int target = spec_.kind == ExtractorKind::Surrogate ? spec_.resolved_input_size()
                                                            : vit_->config().image_size;
        ad::Var x = frame;
        if (frame.dim(1) != target || frame.dim(2) != target)
            x = ad::bilinear_resize(x, target, target);
        if (c == 1) x = ad::replicate_channels(x, 3);

        int side = target / spec_.region_size;
        std::vector<TokenGrid> grids;
        if (spec_.kind == ExtractorKind::Surrogate) {
            ad::Var regions = ad::extract_regions(x, spec_.region_size); // [N_r, r*r*3]
            for (int l : layers.layer_ids) {
                TokenGrid g;
                g.tokens = ad::tanh_(ad::add_rowvec(ad::matmul(regions, proj_[l]), bias_[l]));
                g.grid_rows = side;
                g.grid_cols = side;
                g.layer_id = l;
                grids.push_back(std::move(g));
            }
        } else {
            std::vector<ad::Var> toks = vit_->forward_blocks(x, layers.layer_ids);
            for (std::size_t i = 0; i < toks.size(); ++i) {
                TokenGrid g;
                g.tokens = toks[i];
                g.grid_rows = side;
                g.grid_cols = side;
                g.layer_id = layers.layer_ids[i];
                grids.push_back(std::move(g));
            }
        }
        return grids;
    }

    std::vector<TokenGrid> extract(const Frame& frame, const LayerSelection& layers) const {
        return extract(frame_to_var(frame), layers);
    }

private:
    ExtractorSpec spec_;
    std::vector<ad::Var> proj_; // surrogate per-layer P
    std::vector<ad::Var> bias_; // surrogate per-layer b
    std::shared_ptr<ViTBackbone> vit_;
};

} // namespace roma
