#pragma once

// Cross-domain region similarity matching: similarity maps between source and
// translated token grids, and the global / local / temporal losses built on
// row-wise cosine distance between the two map directions.

#include <cstdint>
#include <string>
#include <vector>

#include "roma/autodiff.hpp"
#include "roma/embedding.hpp"
#include "roma/random.hpp"

namespace roma {

inline constexpr double kCosineEps = 1e-8;

// N_r x N_r map; entry (i, j) is the dot product of source token i with
// target token j for the layer it was built from.
struct CrossSimMap {
    ad::Var matrix;
    int layer_id = 0;
};

namespace detail {

inline void require_matched(const TokenGrid& u, const TokenGrid& v, const char* op) {
    if (u.count() != v.count() || u.dim() != v.dim())
        throw ArgumentError(std::string(op) + ": token grids must share N_r and d");
}

inline void require_layer_match(const std::vector<TokenGrid>& a, const std::vector<TokenGrid>& b,
                                const char* op) {
    if (a.empty() || a.size() != b.size())
        throw ArgumentError(std::string(op) + ": per-layer grid lists must be non-empty and equal length");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].layer_id != b[i].layer_id)
            throw ArgumentError(std::string(op) + ": layer mismatch at position " + std::to_string(i));
        require_matched(a[i], b[i], op);
    }
}

} // namespace detail

inline CrossSimMap cross_sim(const TokenGrid& u, const TokenGrid& v) {
    detail::require_matched(u, v, "cross_sim");
    CrossSimMap m;
    m.matrix = ad::matmul(u.tokens, ad::transpose2d(v.tokens));
    m.layer_id = u.layer_id;
    return m;
}

// mean over rows of 1 - <a_i, b_i> / (|a_i| |b_i| + eps)
inline ad::Var cosine_match(const CrossSimMap& a, const CrossSimMap& b) {
    if (!a.matrix.value().same_shape(b.matrix.value()))
        throw ArgumentError("cosine_match: similarity maps must share N_r");
    ad::Var dot = ad::row_sum(ad::mul(a.matrix, b.matrix));
    ad::Var na = ad::sqrt_(ad::row_sum(ad::mul(a.matrix, a.matrix)));
    ad::Var nb = ad::sqrt_(ad::row_sum(ad::mul(b.matrix, b.matrix)));
    ad::Var cos = ad::colvec_div(dot, ad::add_scalar(ad::mul(na, nb), kCosineEps));
    return ad::mean(ad::rsub_scalar(1.0, cos));
}

// L_g for one frame pair: mean over layers of the cosine match between the
// source-direction map and its target-direction transpose
inline ad::Var global_loss(const std::vector<TokenGrid>& x_grids,
                           const std::vector<TokenGrid>& y_grids) {
    detail::require_layer_match(x_grids, y_grids, "global_loss");
    ad::Var total;
    for (std::size_t l = 0; l < x_grids.size(); ++l) {
        CrossSimMap sx = cross_sim(x_grids[l], y_grids[l]);
        CrossSimMap sy{ad::transpose2d(sx.matrix), sx.layer_id};
        ad::Var term = cosine_match(sx, sy);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(x_grids.size()));
}

// N_a uniformly placed top-left corners; areas may overlap each other
inline std::vector<AreaSpec> sample_areas(int grid_rows, int grid_cols, int count, int area_rows,
                                          int area_cols, std::uint64_t seed) {
    if (area_rows <= 0 || area_cols <= 0 || area_rows > grid_rows || area_cols > grid_cols)
        throw ArgumentError("sample_areas: area does not fit in grid");
    if (count < 0) throw ArgumentError("sample_areas: negative count");
    Rng rng(mix_seed(seed, 0x41524541));
    std::vector<AreaSpec> areas;
    areas.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        AreaSpec a;
        a.row0 = rng.uniform_int(0, grid_rows - area_rows);
        a.col0 = rng.uniform_int(0, grid_cols - area_cols);
        a.rows = area_rows;
        a.cols = area_cols;
        areas.push_back(a);
    }
    return areas;
}

// L_l for one frame pair: areas of the translated frame sit at the same grid
// locations as the source areas
inline ad::Var local_loss(const std::vector<TokenGrid>& x_grids,
                          const std::vector<TokenGrid>& y_grids,
                          const std::vector<AreaSpec>& areas) {
    detail::require_layer_match(x_grids, y_grids, "local_loss");
    if (areas.empty()) throw ArgumentError("local_loss: no areas");
    ad::Var total;
    for (std::size_t l = 0; l < x_grids.size(); ++l) {
        for (const AreaSpec& area : areas) {
            TokenGrid ua = select_area_tokens(x_grids[l], area);
            TokenGrid va = select_area_tokens(y_grids[l], area);
            CrossSimMap sx = cross_sim(ua, va);
            CrossSimMap sy{ad::transpose2d(sx.matrix), sx.layer_id};
            ad::Var term = cosine_match(sx, sy);
            total = total.defined() ? ad::add(total, term) : term;
        }
    }
    double norm = 1.0 / (static_cast<double>(x_grids.size()) * static_cast<double>(areas.size()));
    return ad::mul_scalar(total, norm);
}

// Temporal maps for every (t, t') pair of a fragment, kept around for
// inspection; temporal_loss consumes them.
struct FragmentSimBundle {
    struct Entry {
        int t = 0;       // 0-based source frame
        int t_prime = 0; // 0-based later frame
        CrossSimMap sx;  // u_i(t) . v_*(t')^T
        CrossSimMap sy;  // v_i(t) . u_*(t')^T
    };
    std::vector<Entry> entries;
    int num_layers = 0;
};

inline FragmentSimBundle build_fragment_sim_bundle(
    const std::vector<std::vector<TokenGrid>>& x_frames,
    const std::vector<std::vector<TokenGrid>>& y_frames, int delta_t) {
    if (delta_t < 0) throw ArgumentError("temporal_loss: delta_t must be >= 0");
    if (x_frames.size() != y_frames.size())
        throw ArgumentError("temporal_loss: frame count mismatch");
    int n = static_cast<int>(x_frames.size());
    if (n < delta_t + 1)
        throw ArgumentError("temporal_loss: fragment shorter than delta_t + 1");
    for (int t = 0; t < n; ++t)
        detail::require_layer_match(x_frames[t], y_frames[t], "temporal_loss");

    FragmentSimBundle bundle;
    bundle.num_layers = static_cast<int>(x_frames[0].size());
    for (int t = 0; t + delta_t < n; ++t) {
        for (int tp = t + 1; tp <= t + delta_t; ++tp) {
            for (std::size_t l = 0; l < x_frames[t].size(); ++l) {
                FragmentSimBundle::Entry e;
                e.t = t;
                e.t_prime = tp;
                e.sx = cross_sim(x_frames[t][l], y_frames[tp][l]);
                e.sy = cross_sim(y_frames[t][l], x_frames[tp][l]);
                bundle.entries.push_back(std::move(e));
            }
        }
    }
    return bundle;
}

// L_tem over a fragment: sum over (t, t') pairs with t' - t <= delta_t of the
// cosine match between the two temporal map directions, scaled by 1/N_l
inline ad::Var temporal_loss(const std::vector<std::vector<TokenGrid>>& x_frames,
                             const std::vector<std::vector<TokenGrid>>& y_frames, int delta_t) {
    FragmentSimBundle bundle = build_fragment_sim_bundle(x_frames, y_frames, delta_t);
    if (bundle.entries.empty()) return ad::Var::constant(Tensor::scalar(0.0));
    ad::Var total;
    for (const auto& e : bundle.entries) {
        ad::Var term = cosine_match(e.sx, e.sy);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(bundle.num_layers));
}

} // namespace roma
