#pragma once

// Overall optimization: alternating discriminator / generator steps over
// sampled video fragments, with per-step structured logging and checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "roma/config.hpp"
#include "roma/crossim.hpp"
#include "roma/data.hpp"
#include "roma/discriminator.hpp"
#include "roma/generator.hpp"
#include "roma/nn.hpp"
#include "roma/serialize.hpp"

namespace roma {

inline constexpr char kCheckpointMagic[8] = {'R', 'O', 'M', 'A', 'C', 'K', 'P', '1'};

// ---------------------------------------------------------------------------
// Components
// ---------------------------------------------------------------------------

struct TrainComponents {
    FeatureExtractor extractor;
    Generator generator;
    DiscriminatorHead head;
    LayerSelection structural_layers;
    int disc_layer; // final extractor layer feeds the discriminator

    explicit TrainComponents(const TrainConfig& cfg)
        : extractor(cfg.extractor_spec()),
          generator(cfg.generator_config(), mix_seed(cfg.seed, 0x67656E00)),
          head(extractor.token_dim(), cfg.disc_hidden, mix_seed(cfg.seed, 0x68656100)),
          structural_layers{cfg.layers},
          disc_layer(extractor.num_layers() - 1) {
        structural_layers.validate(extractor.num_layers());
        cfg.scale_list().validate(extractor.grid_side(), extractor.grid_side());
    }
};

namespace detail {

// structural layers plus the discriminator layer appended when missing;
// second member tells whether it was appended
inline std::pair<LayerSelection, bool> with_disc_layer(const LayerSelection& sel, int disc_layer) {
    LayerSelection out = sel;
    bool appended = false;
    if (std::find(out.layer_ids.begin(), out.layer_ids.end(), disc_layer) == out.layer_ids.end()) {
        out.layer_ids.push_back(disc_layer);
        appended = true;
    }
    return {out, appended};
}

inline std::uint64_t area_seed(const TrainConfig& cfg, long step, int frame) {
    return mix_seed(mix_seed(cfg.seed, 0x4C4F4341),
                    static_cast<std::uint64_t>(step) * 8191u + static_cast<std::uint64_t>(frame));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

struct GStepLoss {
    ad::Var total;
    double total_value = 0;
    double adv = 0;
    double global_ = 0;
    double local_ = 0;
    double temporal_ = 0;
};

// L_g and L_l averaged over the fragment's frames, L_tem over the fragment;
// exposed separately so the pieces can be checked against the assembled total
inline std::array<ad::Var, 3> structural_losses(
    const std::vector<std::vector<TokenGrid>>& x_grids,
    const std::vector<std::vector<TokenGrid>>& y_grids, const TrainConfig& cfg, long step) {
    int frames = static_cast<int>(x_grids.size());
    ad::Var zero = ad::Var::constant(Tensor::scalar(0.0));
    ad::Var lg, ll;
    for (int t = 0; t < frames; ++t) {
        ad::Var g = global_loss(x_grids[t], y_grids[t]);
        lg = lg.defined() ? ad::add(lg, g) : g;
        if (cfg.num_areas > 0) {
            const TokenGrid& ref = x_grids[t][0];
            auto areas = sample_areas(ref.grid_rows, ref.grid_cols, cfg.num_areas, cfg.area_rows,
                                      cfg.area_cols, detail::area_seed(cfg, step, t));
            ad::Var l = local_loss(x_grids[t], y_grids[t], areas);
            ll = ll.defined() ? ad::add(ll, l) : l;
        }
    }
    lg = ad::mul_scalar(lg, 1.0 / frames);
    ll = ll.defined() ? ad::mul_scalar(ll, 1.0 / frames) : zero;
    ad::Var ltem = cfg.delta_t > 0 ? temporal_loss(x_grids, y_grids, cfg.delta_t) : zero;
    return {lg, ll, ltem};
}

inline GStepLoss g_step_loss(const FragmentSampler::Batch& batch, TrainComponents& comps,
                             const TrainConfig& cfg, long step) {
    auto [sel, appended] = detail::with_disc_layer(comps.structural_layers, comps.disc_layer);
    std::size_t disc_pos = static_cast<std::size_t>(
        std::find(sel.layer_ids.begin(), sel.layer_ids.end(), comps.disc_layer) -
        sel.layer_ids.begin());

    std::vector<std::vector<TokenGrid>> x_grids, y_grids;
    ad::Var adv;
    for (const Frame& frame : batch.fragment.frames) {
        if (frame.channels != cfg.input_channels)
            throw ArgumentError("train: source frame channel count does not match config");
        ad::Var x = frame_to_var(frame);
        ad::Var y = comps.generator.forward(x);
        std::vector<TokenGrid> xg = comps.extractor.extract(x, sel);
        std::vector<TokenGrid> yg = comps.extractor.extract(y, sel);
        // adversarial term on the final-layer tokens of the translated frame
        MultiScaleTokens fake = build_multiscale(yg[disc_pos], cfg.scale_list());
        ad::Var a = g_adv_loss(comps.head, fake, cfg.adv());
        adv = adv.defined() ? ad::add(adv, a) : a;
        if (appended) {
            xg.pop_back();
            yg.pop_back();
        }
        x_grids.push_back(std::move(xg));
        y_grids.push_back(std::move(yg));
    }
    adv = ad::mul_scalar(adv, 1.0 / static_cast<double>(batch.fragment.frames.size()));

    auto [lg, ll, ltem] = structural_losses(x_grids, y_grids, cfg, step);

    GStepLoss out;
    out.total = ad::add(adv, ad::add(ad::mul_scalar(lg, cfg.lambda_global),
                                     ad::add(ad::mul_scalar(ll, cfg.lambda_local),
                                             ad::mul_scalar(ltem, cfg.lambda_temporal))));
    out.total_value = out.total.value().item();
    out.adv = adv.value().item();
    out.global_ = lg.value().item();
    out.local_ = ll.value().item();
    out.temporal_ = ltem.value().item();
    return out;
}

// real target frames vs detached generator outputs; only head parameters see
// gradients here
inline ad::Var d_step_loss(const FragmentSampler::Batch& batch, TrainComponents& comps,
                           const TrainConfig& cfg) {
    LayerSelection disc_sel{{comps.disc_layer}};
    std::vector<ad::Var> fake_parts, real_parts;
    for (const Frame& frame : batch.fragment.frames) {
        ad::Var fake;
        {
            ad::NoGradGuard guard;
            fake = comps.generator.forward(frame_to_var(frame));
        }
        ROMA_DEBUG_CHECK(!fake.requires_grad(),
                         "d_step_loss: generator outputs must be detached from the generator graph");
        TokenGrid grid = comps.extractor.extract(fake, disc_sel)[0];
        fake_parts.push_back(build_multiscale(grid, cfg.scale_list()).tokens);
    }
    for (const Frame& frame : batch.target_frames) {
        TokenGrid grid = comps.extractor.extract(frame_to_var(frame), disc_sel)[0];
        real_parts.push_back(build_multiscale(grid, cfg.scale_list()).tokens);
    }
    ad::Var fake_logits = comps.head.logits(ad::concat_rows(fake_parts));
    ad::Var real_logits = comps.head.logits(ad::concat_rows(real_parts));
    return d_loss_from_logits(real_logits, fake_logits);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline void store_params(TensorArchive& a, const std::string& prefix, const ParamStore& store) {
    for (std::size_t i = 0; i < store.count(); ++i)
        a.add(prefix + "/" + store.name(i), store.var(i).value());
}

inline void restore_params(const TensorArchive& a, const std::string& prefix, ParamStore& store) {
    for (std::size_t i = 0; i < store.count(); ++i) {
        const Tensor& t = a.get(prefix + "/" + store.name(i));
        if (!t.same_shape(store.var(i).value()))
            throw LoadError("checkpoint: shape mismatch for " + prefix + "/" + store.name(i));
        store.var(i).value_mut() = t;
    }
}

inline void store_adam(TensorArchive& a, const std::string& prefix, AdamOptimizer& opt) {
    a.meta[prefix + "_t"] = std::to_string(opt.step_count());
    for (std::size_t i = 0; i < opt.moment1().size(); ++i) {
        a.add(prefix + "/m/" + std::to_string(i), opt.moment1()[i]);
        a.add(prefix + "/v/" + std::to_string(i), opt.moment2()[i]);
    }
}

inline void restore_adam(const TensorArchive& a, const std::string& prefix, AdamOptimizer& opt) {
    opt.set_step_count(std::stoll(a.meta_at(prefix + "_t")));
    for (std::size_t i = 0; i < opt.moment1().size(); ++i) {
        opt.moment1()[i] = a.get(prefix + "/m/" + std::to_string(i));
        opt.moment2()[i] = a.get(prefix + "/v/" + std::to_string(i));
    }
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, long step,
                            TrainComponents& comps, AdamOptimizer* adam_g, AdamOptimizer* adam_d,
                            const std::string& sampler_rng) {
    TensorArchive a;
    a.meta["config"] = serialize_config(cfg);
    a.meta["fingerprint"] = std::to_string(config_fingerprint(cfg));
    a.meta["step"] = std::to_string(step);
    a.meta["sampler_rng"] = sampler_rng;
    detail::store_params(a, "gen", comps.generator.params());
    detail::store_params(a, "head", comps.head.params());
    if (adam_g) detail::store_adam(a, "adamg", *adam_g);
    if (adam_d) detail::store_adam(a, "adamd", *adam_d);
    a.save(path, kCheckpointMagic);
}

struct LoadedCheckpoint {
    TrainConfig config;
    long step = 0;
    std::string sampler_rng;
    TensorArchive archive;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw LoadError("checkpoint not found: " + path.string());
    LoadedCheckpoint c;
    c.archive = TensorArchive::load(path, kCheckpointMagic);
    c.config = parse_config(c.archive.meta_at("config"));
    if (std::to_string(config_fingerprint(c.config)) != c.archive.meta_at("fingerprint"))
        throw LoadError("checkpoint: config fingerprint mismatch in " + path.string());
    c.step = std::stol(c.archive.meta_at("step"));
    c.sampler_rng = c.archive.meta_at("sampler_rng");
    return c;
}

inline void restore_components(const LoadedCheckpoint& ckpt, TrainComponents& comps,
                               AdamOptimizer* adam_g = nullptr, AdamOptimizer* adam_d = nullptr) {
    detail::restore_params(ckpt.archive, "gen", comps.generator.params());
    detail::restore_params(ckpt.archive, "head", comps.head.params());
    if (adam_g) detail::restore_adam(ckpt.archive, "adamg", *adam_g);
    if (adam_d) detail::restore_adam(ckpt.archive, "adamd", *adam_d);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRecord {
    long step = 0;
    double d_loss = 0, g_total = 0, g_adv = 0, l_g = 0, l_l = 0, l_tem = 0;
    double wall_ms = 0;
};

inline std::vector<StepRecord> parse_train_log(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open log: " + path.string());
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        StepRecord r;
        r.step = j.at("step").get<long>();
        r.d_loss = j.at("d_loss").get<double>();
        r.g_total = j.at("g_total").get<double>();
        r.g_adv = j.at("g_adv").get<double>();
        r.l_g = j.at("l_g").get<double>();
        r.l_l = j.at("l_l").get<double>();
        r.l_tem = j.at("l_tem").get<double>();
        r.wall_ms = j.at("wall_ms").get<double>();
        out.push_back(r);
    }
    return out;
}

struct TrainResult {
    long steps_completed = 0;
    std::filesystem::path final_checkpoint;
    std::filesystem::path initial_checkpoint;
    std::filesystem::path log_path;
};

inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& dataset_root,
                         const std::filesystem::path& out_dir, bool resume = false) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (!std::filesystem::is_directory(out_dir))
        throw TrainingError("train: cannot create output directory " + out_dir.string());

    TrainComponents comps(cfg);
    AdamOptimizer adam_g(comps.generator.params(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    AdamOptimizer adam_d(comps.head.params(), cfg.learning_rate, cfg.beta1, cfg.beta2);

    auto [source, target] = scan_dataset(dataset_root);
    FragmentSampler sampler(std::move(source), std::move(target), cfg.delta_t,
                            mix_seed(cfg.seed, 0x73616D70));

    std::filesystem::path latest = out_dir / "ckpt_latest.bin";
    std::filesystem::path initial = out_dir / "ckpt_initial.bin";
    std::filesystem::path final_path = out_dir / "ckpt_final.bin";
    std::filesystem::path log_path = out_dir / "train_log.jsonl";

    long start_step = 0;
    if (resume && std::filesystem::exists(latest)) {
        LoadedCheckpoint ckpt = load_checkpoint(latest);
        if (config_fingerprint(ckpt.config) != config_fingerprint(cfg))
            throw ConfigError("train: resume config does not match checkpoint config");
        restore_components(ckpt, comps, &adam_g, &adam_d);
        sampler.load_rng(ckpt.sampler_rng);
        start_step = ckpt.step;
    } else {
        save_checkpoint(initial, cfg, 0, comps, &adam_g, &adam_d, sampler.save_rng());
        save_checkpoint(latest, cfg, 0, comps, &adam_g, &adam_d, sampler.save_rng());
    }

    std::ofstream log(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw TrainingError("train: cannot open log " + log_path.string());
    log.precision(17);

    for (long step = start_step; step < cfg.total_steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        FragmentSampler::Batch batch = sampler.next();

        adam_d.zero_grad();
        ad::Var d = d_step_loss(batch, comps, cfg);
        double d_value = d.value().item();
        if (!std::isfinite(d_value))
            throw TrainingError("train: non-finite discriminator loss at step " +
                                std::to_string(step));
        ad::backward(d);
        adam_d.step();

        adam_g.zero_grad();
        GStepLoss g = g_step_loss(batch, comps, cfg, step);
        if (!std::isfinite(g.total_value))
            throw TrainingError("train: non-finite generator loss at step " + std::to_string(step) +
                                " (adv=" + std::to_string(g.adv) + " l_g=" + std::to_string(g.global_) +
                                " l_l=" + std::to_string(g.local_) +
                                " l_tem=" + std::to_string(g.temporal_) + ")");
        ad::backward(g.total);
        adam_g.step();

        double wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
        if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
            nlohmann::json j{{"step", step},       {"d_loss", d_value},    {"g_total", g.total_value},
                             {"g_adv", g.adv},     {"l_g", g.global_},     {"l_l", g.local_},
                             {"l_tem", g.temporal_}, {"wall_ms", wall_ms}};
            log << j.dump() << "\n";
            log.flush();
        }
        if ((step + 1) % 100 == 0)
            std::cerr << "step " << (step + 1) << "/" << cfg.total_steps << " d=" << d_value
                      << " g=" << g.total_value << " l_g=" << g.global_ << "\n";
        if ((step + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(latest, cfg, step + 1, comps, &adam_g, &adam_d, sampler.save_rng());
    }

    save_checkpoint(latest, cfg, cfg.total_steps, comps, &adam_g, &adam_d, sampler.save_rng());
    save_checkpoint(final_path, cfg, cfg.total_steps, comps, &adam_g, &adam_d, sampler.save_rng());

    TrainResult r;
    r.steps_completed = cfg.total_steps;
    r.final_checkpoint = final_path;
    r.initial_checkpoint = initial;
    r.log_path = log_path;
    return r;
}

} // namespace roma
