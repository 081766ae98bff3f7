#pragma once

// Frozen vision-transformer feature extractor. Weights come from a tensor
// archive on disk (see serialize.hpp for the layout); the forward pass is
// differentiable with respect to the input frame so generator gradients can
// flow through it, but the weights themselves never require grad.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "roma/autodiff.hpp"
#include "roma/random.hpp"
#include "roma/serialize.hpp"

namespace roma {

inline constexpr char kViTMagic[8] = {'R', 'O', 'M', 'A', 'V', 'I', 'T', '1'};

struct ViTConfig {
    int image_size = 224;
    int patch_size = 16;
    int dim = 384;
    int depth = 12;
    int heads = 6;
    int mlp_dim = 1536;

    int tokens_per_side() const { return image_size / patch_size; }
    int num_patches() const { return tokens_per_side() * tokens_per_side(); }
};

struct ViTWeights {
    ViTConfig config;
    Tensor patch_w; // [patch*patch*3, dim]
    Tensor patch_b; // [dim]
    Tensor cls;     // [1, dim]
    Tensor pos;     // [num_patches+1, dim]
    struct Block {
        Tensor ln1_g, ln1_b;   // [dim]
        Tensor qkv_w, qkv_b;   // [dim, 3*dim], [3*dim]
        Tensor proj_w, proj_b; // [dim, dim], [dim]
        Tensor ln2_g, ln2_b;   // [dim]
        Tensor fc1_w, fc1_b;   // [dim, mlp_dim], [mlp_dim]
        Tensor fc2_w, fc2_b;   // [mlp_dim, dim], [dim]
    };
    std::vector<Block> blocks;

    static ViTWeights random(const ViTConfig& cfg, std::uint64_t seed) {
        if (cfg.image_size % cfg.patch_size != 0)
            throw ConfigError("vit: patch size must divide image size");
        if (cfg.dim % cfg.heads != 0) throw ConfigError("vit: heads must divide dim");
        Rng rng(mix_seed(seed, 0x56495457));
        ViTWeights w;
        w.config = cfg;
        auto randn = [&](std::vector<int> shape, double stddev) {
            Tensor t(std::move(shape));
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
            return t;
        };
        int in = cfg.patch_size * cfg.patch_size * 3;
        w.patch_w = randn({in, cfg.dim}, 1.0 / std::sqrt(in));
        w.patch_b = Tensor({cfg.dim});
        w.cls = randn({1, cfg.dim}, 0.02);
        w.pos = randn({cfg.num_patches() + 1, cfg.dim}, 0.02);
        for (int bIdx = 0; bIdx < cfg.depth; ++bIdx) {
            Block b;
            b.ln1_g = Tensor({cfg.dim}, 1.0);
            b.ln1_b = Tensor({cfg.dim});
            b.qkv_w = randn({cfg.dim, 3 * cfg.dim}, 1.0 / std::sqrt(cfg.dim));
            b.qkv_b = Tensor({3 * cfg.dim});
            b.proj_w = randn({cfg.dim, cfg.dim}, 1.0 / std::sqrt(cfg.dim));
            b.proj_b = Tensor({cfg.dim});
            b.ln2_g = Tensor({cfg.dim}, 1.0);
            b.ln2_b = Tensor({cfg.dim});
            b.fc1_w = randn({cfg.dim, cfg.mlp_dim}, 1.0 / std::sqrt(cfg.dim));
            b.fc1_b = Tensor({cfg.mlp_dim});
            b.fc2_w = randn({cfg.mlp_dim, cfg.dim}, 1.0 / std::sqrt(cfg.mlp_dim));
            b.fc2_b = Tensor({cfg.dim});
            w.blocks.push_back(std::move(b));
        }
        return w;
    }

    void save(const std::filesystem::path& path) const {
        TensorArchive a;
        a.meta["image_size"] = std::to_string(config.image_size);
        a.meta["patch_size"] = std::to_string(config.patch_size);
        a.meta["dim"] = std::to_string(config.dim);
        a.meta["depth"] = std::to_string(config.depth);
        a.meta["heads"] = std::to_string(config.heads);
        a.meta["mlp_dim"] = std::to_string(config.mlp_dim);
        a.add("patch.w", patch_w);
        a.add("patch.b", patch_b);
        a.add("cls", cls);
        a.add("pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const Block& b = blocks[i];
            std::string p = "block" + std::to_string(i) + ".";
            a.add(p + "ln1.g", b.ln1_g);
            a.add(p + "ln1.b", b.ln1_b);
            a.add(p + "qkv.w", b.qkv_w);
            a.add(p + "qkv.b", b.qkv_b);
            a.add(p + "proj.w", b.proj_w);
            a.add(p + "proj.b", b.proj_b);
            a.add(p + "ln2.g", b.ln2_g);
            a.add(p + "ln2.b", b.ln2_b);
            a.add(p + "fc1.w", b.fc1_w);
            a.add(p + "fc1.b", b.fc1_b);
            a.add(p + "fc2.w", b.fc2_w);
            a.add(p + "fc2.b", b.fc2_b);
        }
        a.save(path, kViTMagic);
    }

    static ViTWeights load(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path))
            throw LoadError("vit: weights file not found: " + path.string());
        TensorArchive a = TensorArchive::load(path, kViTMagic);
        ViTWeights w;
        w.config.image_size = std::stoi(a.meta_at("image_size"));
        w.config.patch_size = std::stoi(a.meta_at("patch_size"));
        w.config.dim = std::stoi(a.meta_at("dim"));
        w.config.depth = std::stoi(a.meta_at("depth"));
        w.config.heads = std::stoi(a.meta_at("heads"));
        w.config.mlp_dim = std::stoi(a.meta_at("mlp_dim"));
        w.patch_w = a.get("patch.w");
        w.patch_b = a.get("patch.b");
        w.cls = a.get("cls");
        w.pos = a.get("pos");
        for (int i = 0; i < w.config.depth; ++i) {
            std::string p = "block" + std::to_string(i) + ".";
            Block b;
            b.ln1_g = a.get(p + "ln1.g");
            b.ln1_b = a.get(p + "ln1.b");
            b.qkv_w = a.get(p + "qkv.w");
            b.qkv_b = a.get(p + "qkv.b");
            b.proj_w = a.get(p + "proj.w");
            b.proj_b = a.get(p + "proj.b");
            b.ln2_g = a.get(p + "ln2.g");
            b.ln2_b = a.get(p + "ln2.b");
            b.fc1_w = a.get(p + "fc1.w");
            b.fc1_b = a.get(p + "fc1.b");
            b.fc2_w = a.get(p + "fc2.w");
            b.fc2_b = a.get(p + "fc2.b");
            w.blocks.push_back(std::move(b));
        }
        return w;
    }
};

// Runs the transformer and hands back per-block patch-token matrices.
class ViTBackbone {
public:
    explicit ViTBackbone(ViTWeights weights) : w_(std::move(weights)) {
        wrap();
    }

    const ViTConfig& config() const { return w_.config; }

    // x: [3, S, S] with S == config.image_size. Returns one [N_r, dim] token
    // matrix per requested block index (0-based, in request order).
    std::vector<ad::Var> forward_blocks(const ad::Var& x, const std::vector<int>& block_ids) const {
        const ViTConfig& c = w_.config;
        if (x.rank() != 3 || x.dim(0) != 3 || x.dim(1) != c.image_size || x.dim(2) != c.image_size)
            throw ArgumentError("vit: input must be [3," + std::to_string(c.image_size) + "," +
                                std::to_string(c.image_size) + "]");
        for (int id : block_ids)
            if (id < 0 || id >= c.depth)
                throw ConfigError("vit: unknown layer index " + std::to_string(id));

        ad::Var patches = ad::extract_regions(x, c.patch_size); // [N, p*p*3]
        ad::Var tok = ad::add_rowvec(ad::matmul(patches, vpatch_w_), vpatch_b_);
        tok = ad::concat_rows({vcls_, tok});     // prepend CLS
        tok = ad::add(tok, vpos_);               // positional embedding

        int maxb = 0;
        for (int id : block_ids) maxb = std::max(maxb, id);
        std::vector<ad::Var> outputs(c.depth);
        for (int bi = 0; bi <= maxb; ++bi) {
            tok = block_forward(bi, tok);
            outputs[bi] = tok;
        }
        std::vector<ad::Var> result;
        int n = c.num_patches();
        std::vector<int> keep(n);
        for (int i = 0; i < n; ++i) keep[i] = i + 1; // drop CLS row
        for (int id : block_ids) result.push_back(ad::gather_rows(outputs[id], keep));
        return result;
    }

private:
    void wrap() {
        auto cv = [](const Tensor& t) { return ad::Var::constant(t); };
        vpatch_w_ = cv(w_.patch_w);
        vpatch_b_ = cv(w_.patch_b);
        vcls_ = cv(w_.cls);
        vpos_ = cv(w_.pos);
        for (const auto& b : w_.blocks) {
            BlockVars v;
            v.ln1_g = cv(b.ln1_g);
            v.ln1_b = cv(b.ln1_b);
            v.qkv_w = cv(b.qkv_w);
            v.qkv_b = cv(b.qkv_b);
            v.proj_w = cv(b.proj_w);
            v.proj_b = cv(b.proj_b);
            v.ln2_g = cv(b.ln2_g);
            v.ln2_b = cv(b.ln2_b);
            v.fc1_w = cv(b.fc1_w);
            v.fc1_b = cv(b.fc1_b);
            v.fc2_w = cv(b.fc2_w);
            v.fc2_b = cv(b.fc2_b);
            vblocks_.push_back(std::move(v));
        }
    }

    ad::Var block_forward(int i, const ad::Var& x) const {
        const ViTConfig& c = w_.config;
        const BlockVars& b = vblocks_[static_cast<std::size_t>(i)];
        int dh = c.dim / c.heads;
        double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        ad::Var h = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
        ad::Var qkv = ad::add_rowvec(ad::matmul(h, b.qkv_w), b.qkv_b); // [N, 3*dim]
        std::vector<ad::Var> head_outs;
        for (int hd = 0; hd < c.heads; ++hd) {
            ad::Var q = ad::col_slice(qkv, hd * dh, dh);
            ad::Var k = ad::col_slice(qkv, c.dim + hd * dh, dh);
            ad::Var v = ad::col_slice(qkv, 2 * c.dim + hd * dh, dh);
            ad::Var att = ad::softmax_rows(ad::mul_scalar(ad::matmul(q, ad::transpose2d(k)), scale));
            head_outs.push_back(ad::matmul(att, v));
        }
        ad::Var attn = ad::concat_cols(head_outs);
        ad::Var out = ad::add(x, ad::add_rowvec(ad::matmul(attn, b.proj_w), b.proj_b));

        ad::Var h2 = ad::layer_norm_rows(out, b.ln2_g, b.ln2_b);
        h2 = ad::gelu(ad::add_rowvec(ad::matmul(h2, b.fc1_w), b.fc1_b));
        h2 = ad::add_rowvec(ad::matmul(h2, b.fc2_w), b.fc2_b);
        return ad::add(out, h2);
    }

    struct BlockVars {
        ad::Var ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
        ad::Var ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    ViTWeights w_;
    ad::Var vpatch_w_, vpatch_b_, vcls_, vpos_;
    std::vector<BlockVars> vblocks_;
};

} // namespace roma
