#pragma once

// Frame-wise translation network: convolutional encoder, residual middle
// blocks, upsampling decoder, tanh-bounded 3-channel output.

#include <cstdint>
#include <string>
#include <vector>

#include "roma/embedding.hpp"
#include "roma/nn.hpp"

namespace roma {

struct GeneratorConfig {
    int input_channels = 1;
    int resolution = 256;
    int width = 64;
    int down_stages = 2;
    int res_blocks = 9;

    // 9 residual blocks above 128 px, 6 at or below
    static GeneratorConfig standard(int resolution, int input_channels) {
        GeneratorConfig c;
        c.resolution = resolution;
        c.input_channels = input_channels;
        c.res_blocks = resolution > 128 ? 9 : 6;
        return c;
    }

    static GeneratorConfig tiny(int resolution, int input_channels) {
        GeneratorConfig c;
        c.resolution = resolution;
        c.input_channels = input_channels;
        c.width = 16;
        c.down_stages = 1;
        c.res_blocks = 2;
        return c;
    }

    void validate() const {
        if (input_channels != 1 && input_channels != 3)
            throw ConfigError("generator: input channels must be 1 or 3");
        if (resolution <= 0 || width <= 0 || down_stages < 0 || res_blocks < 0)
            throw ConfigError("generator: non-positive architecture parameter");
        if (resolution % (1 << down_stages) != 0)
            throw ConfigError("generator: resolution must be divisible by 2^down_stages");
    }
};

class Generator {
public:
    Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, 0x47454E52));
        int w = cfg_.width;
        stem_ = Conv2d::make(params_, "stem", cfg_.input_channels, w, 7, 1, 3, rng);
        stem_norm_ = InstanceNorm::make(params_, "stem.norm", w);
        int ch = w;
        for (int i = 0; i < cfg_.down_stages; ++i) {
            std::string name = "down" + std::to_string(i);
            down_.push_back(Conv2d::make(params_, name, ch, ch * 2, 3, 2, 1, rng));
            down_norm_.push_back(InstanceNorm::make(params_, name + ".norm", ch * 2));
            ch *= 2;
        }
        for (int i = 0; i < cfg_.res_blocks; ++i) {
            std::string name = "res" + std::to_string(i);
            res_a_.push_back(Conv2d::make(params_, name + ".a", ch, ch, 3, 1, 1, rng));
            res_a_norm_.push_back(InstanceNorm::make(params_, name + ".a.norm", ch));
            res_b_.push_back(Conv2d::make(params_, name + ".b", ch, ch, 3, 1, 1, rng));
            res_b_norm_.push_back(InstanceNorm::make(params_, name + ".b.norm", ch));
        }
        for (int i = 0; i < cfg_.down_stages; ++i) {
            std::string name = "up" + std::to_string(i);
            up_.push_back(Conv2d::make(params_, name, ch, ch / 2, 3, 1, 1, rng));
            up_norm_.push_back(InstanceNorm::make(params_, name + ".norm", ch / 2));
            ch /= 2;
        }
        head_ = Conv2d::make(params_, "head", ch, 3, 7, 1, 3, rng);
    }

    const GeneratorConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // [C,H,W] in [-1,1] -> [3,H,W] in [-1,1]
    ad::Var forward(const ad::Var& x) const {
        if (x.rank() != 3 || x.dim(0) != cfg_.input_channels)
            throw ArgumentError("generator: expected " + std::to_string(cfg_.input_channels) +
                                " input channels");
        if (x.dim(1) != cfg_.resolution || x.dim(2) != cfg_.resolution)
            throw ArgumentError("generator: input resolution " + std::to_string(x.dim(1)) + "x" +
                                std::to_string(x.dim(2)) + " does not match configured " +
                                std::to_string(cfg_.resolution));
        ad::Var h = ad::relu(stem_norm_.forward(stem_.forward(x)));
        for (std::size_t i = 0; i < down_.size(); ++i)
            h = ad::relu(down_norm_[i].forward(down_[i].forward(h)));
        for (std::size_t i = 0; i < res_a_.size(); ++i) {
            ad::Var r = ad::relu(res_a_norm_[i].forward(res_a_[i].forward(h)));
            r = res_b_norm_[i].forward(res_b_[i].forward(r));
            h = ad::add(h, r);
        }
        for (std::size_t i = 0; i < up_.size(); ++i)
            h = ad::relu(up_norm_[i].forward(up_[i].forward(ad::upsample_nearest2(h))));
        return ad::tanh_(head_.forward(h));
    }

    Frame translate_frame(const Frame& x) const {
        return var_to_frame(forward(frame_to_var(x)));
    }

    std::vector<Frame> translate_clip(const std::vector<Frame>& frames) const {
        if (frames.empty()) throw ArgumentError("translate_clip: empty clip");
        for (const Frame& f : frames)
            if (f.height != frames[0].height || f.width != frames[0].width ||
                f.channels != frames[0].channels)
                throw ArgumentError("translate_clip: frames must share one shape");
        std::vector<Frame> out;
        out.reserve(frames.size());
        for (const Frame& f : frames) out.push_back(translate_frame(f));
        return out;
    }

private:
    GeneratorConfig cfg_;
    ParamStore params_;
    Conv2d stem_, head_;
    InstanceNorm stem_norm_;
    std::vector<Conv2d> down_, up_, res_a_, res_b_;
    std::vector<InstanceNorm> down_norm_, up_norm_, res_a_norm_, res_b_norm_;
};

} // namespace roma
