#pragma once

// Multiscale region-wise discriminator: block-mean pooling of frozen extractor
// tokens at several receptive-field scales, concatenation, and a 3-layer MLP
// emitting one real/fake logit per pooled token.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "roma/embedding.hpp"
#include "roma/nn.hpp"

namespace roma {

struct ScaleList {
    std::vector<int> scales{3, 5, 7};
    bool include_scale_one = false;

    std::vector<int> effective() const {
        std::vector<int> s;
        if (include_scale_one) s.push_back(1);
        s.insert(s.end(), scales.begin(), scales.end());
        return s;
    }

    void validate(int grid_rows, int grid_cols) const {
        for (int k : effective()) {
            if (k <= 0) throw ArgumentError("scales: scale must be positive");
            if (k > grid_rows || k > grid_cols)
                throw ArgumentError("scales: scale " + std::to_string(k) + " exceeds grid " +
                                    std::to_string(grid_rows) + "x" + std::to_string(grid_cols));
        }
    }
};

// mean over non-overlapping k x k region blocks; trailing regions that do not
// fill a block are dropped
inline TokenGrid pool_tokens(const TokenGrid& grid, int k) {
    if (k <= 0) throw ArgumentError("pool_tokens: scale must be positive");
    if (k > grid.grid_rows || k > grid.grid_cols)
        throw ArgumentError("pool_tokens: scale exceeds grid dimensions");
    TokenGrid out;
    out.tokens = ad::block_mean_pool(grid.tokens, grid.grid_rows, grid.grid_cols, k);
    out.grid_rows = grid.grid_rows / k;
    out.grid_cols = grid.grid_cols / k;
    out.layer_id = grid.layer_id;
    return out;
}

// Pooled tokens concatenated across scales, M x d, with per-scale offsets.
struct MultiScaleTokens {
    ad::Var tokens;
    std::vector<int> scales;
    std::vector<int> offsets; // row offset of each scale's block
    std::vector<int> counts;  // rows contributed by each scale

    int count() const { return tokens.dim(0); }
    int dim() const { return tokens.dim(1); }
};

inline MultiScaleTokens build_multiscale(const TokenGrid& grid, const ScaleList& scales) {
    scales.validate(grid.grid_rows, grid.grid_cols);
    MultiScaleTokens out;
    std::vector<ad::Var> parts;
    int offset = 0;
    for (int k : scales.effective()) {
        TokenGrid pooled = pool_tokens(grid, k);
        out.scales.push_back(k);
        out.offsets.push_back(offset);
        out.counts.push_back(pooled.count());
        offset += pooled.count();
        parts.push_back(pooled.tokens);
    }
    out.tokens = ad::concat_rows(parts);
    return out;
}

// expected M for a grid/scale combination
inline int multiscale_token_count(int grid_rows, int grid_cols, const ScaleList& scales) {
    int m = 0;
    for (int k : scales.effective()) m += (grid_rows / k) * (grid_cols / k);
    return m;
}

// d -> hidden -> hidden -> 1, leaky ReLU between the affine layers
class DiscriminatorHead {
public:
    DiscriminatorHead(int input_dim, int hidden, std::uint64_t seed) : input_dim_(input_dim) {
        Rng rng(mix_seed(seed, 0x44484541));
        l1_ = Linear::make(params_, "mlp1", input_dim, hidden, rng);
        l2_ = Linear::make(params_, "mlp2", hidden, hidden, rng);
        l3_ = Linear::make(params_, "mlp3", hidden, 1, rng);
    }

    int input_dim() const { return input_dim_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // [M, d] -> [M, 1] logits
    ad::Var logits(const ad::Var& tokens) const {
        if (tokens.rank() != 2 || tokens.dim(1) != input_dim_)
            throw ArgumentError("discriminate: token dim does not match head input dim");
        ad::Var h = ad::leaky_relu(l1_.forward(tokens), 0.2);
        h = ad::leaky_relu(l2_.forward(h), 0.2);
        return l3_.forward(h);
    }

    ad::Var logits(const MultiScaleTokens& tokens) const { return logits(tokens.tokens); }

private:
    int input_dim_;
    ParamStore params_;
    Linear l1_, l2_, l3_;
};

enum class AdvLossVariant { Saturating, NonSaturating };

// -mean log sigma(D(real)) - mean log(1 - sigma(D(fake))), token-averaged;
// computed through softplus so extreme logits stay finite
inline ad::Var d_loss_from_logits(const ad::Var& real_logits, const ad::Var& fake_logits) {
    ad::Var real_term = ad::mean(ad::softplus(ad::neg(real_logits)));
    ad::Var fake_term = ad::mean(ad::softplus(fake_logits));
    return ad::add(real_term, fake_term);
}

inline ad::Var d_loss(const DiscriminatorHead& head, const MultiScaleTokens& real,
                      const MultiScaleTokens& fake) {
    return d_loss_from_logits(head.logits(real), head.logits(fake));
}

// saturating form: mean log(1 - sigma(D(fake))); non-saturating alternative:
// -mean log sigma(D(fake))
inline ad::Var g_adv_loss_from_logits(const ad::Var& fake_logits, AdvLossVariant variant) {
    if (variant == AdvLossVariant::Saturating)
        return ad::neg(ad::mean(ad::softplus(fake_logits)));
    return ad::mean(ad::softplus(ad::neg(fake_logits)));
}

inline ad::Var g_adv_loss(const DiscriminatorHead& head, const MultiScaleTokens& fake,
                          AdvLossVariant variant) {
    return g_adv_loss_from_logits(head.logits(fake), variant);
}

} // namespace roma
