#pragma once

// Run configuration: every trainable knob plus dataset root and extractor
// settings, parsed from plain "key = value" lines. Unknown keys are rejected
// with their line number; serialize() emits a canonical form that parses back
// to an identical config.

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "roma/discriminator.hpp"
#include "roma/embedding.hpp"
#include "roma/errors.hpp"
#include "roma/generator.hpp"
#include "roma/serialize.hpp"

namespace roma {

struct TrainConfig {
    // losses
    double lambda_global = 5.0;
    double lambda_local = 5.0;
    double lambda_temporal = 1.0;
    int delta_t = 2;
    int num_areas = 64;
    int area_rows = 5;
    int area_cols = 5;
    std::string adv_variant = "saturating"; // or "non_saturating"

    // discriminator
    std::vector<int> scales{3, 5, 7};
    bool include_scale_one = false;
    int disc_hidden = 128;

    // extractor
    std::string extractor_kind = "surrogate"; // or "pretrained-vit"
    int region_size = 16;
    int embed_dim = 64;
    std::uint64_t extractor_seed = 0;
    int extractor_input_size = 0; // 0 = kind default
    std::string weights_path;
    std::vector<int> layers{0, 1, 2, 3};

    // generator
    std::string generator_preset = "standard"; // or "tiny"
    int resolution = 256;
    int input_channels = 1;

    // optimization
    std::string optimizer = "adam";
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    long total_steps = 2000;
    std::uint64_t seed = 0;
    long checkpoint_every = 500;
    long log_every = 1;

    // data
    std::string data_root;

    ExtractorSpec extractor_spec() const {
        ExtractorSpec s;
        s.kind = extractor_kind == "surrogate" ? ExtractorKind::Surrogate
                                               : ExtractorKind::PretrainedViT;
        s.region_size = region_size;
        s.embed_dim = embed_dim;
        s.seed = extractor_seed;
        s.weights_path = weights_path;
        s.input_size = extractor_input_size;
        return s;
    }

    GeneratorConfig generator_config() const {
        return generator_preset == "tiny" ? GeneratorConfig::tiny(resolution, input_channels)
                                          : GeneratorConfig::standard(resolution, input_channels);
    }

    ScaleList scale_list() const {
        ScaleList s;
        s.scales = scales;
        s.include_scale_one = include_scale_one;
        return s;
    }

    AdvLossVariant adv() const {
        return adv_variant == "non_saturating" ? AdvLossVariant::NonSaturating
                                               : AdvLossVariant::Saturating;
    }

    void validate() const {
        if (lambda_global < 0 || lambda_local < 0 || lambda_temporal < 0)
            throw ConfigError("config: loss weights must be >= 0");
        if (delta_t < 0) throw ConfigError("config: delta_t must be >= 0");
        if (num_areas < 0) throw ConfigError("config: num_areas must be >= 0");
        if (area_rows < 1 || area_cols < 1)
            throw ConfigError("config: area dimensions must be >= 1");
        if (adv_variant != "saturating" && adv_variant != "non_saturating")
            throw ConfigError("config: adv_variant must be saturating or non_saturating");
        if (extractor_kind != "surrogate" && extractor_kind != "pretrained-vit")
            throw ConfigError("config: extractor_kind must be surrogate or pretrained-vit");
        if (generator_preset != "standard" && generator_preset != "tiny")
            throw ConfigError("config: generator_preset must be standard or tiny");
        if (optimizer != "adam") throw ConfigError("config: optimizer must be adam");
        if (learning_rate <= 0) throw ConfigError("config: learning_rate must be > 0");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("config: betas must lie in [0, 1)");
        if (total_steps < 0) throw ConfigError("config: total_steps must be >= 0");
        if (checkpoint_every < 1 || log_every < 1)
            throw ConfigError("config: cadences must be >= 1");
        if (disc_hidden < 1) throw ConfigError("config: disc_hidden must be >= 1");
        if (region_size < 1) throw ConfigError("config: region_size must be >= 1");
        if (embed_dim < 1) throw ConfigError("config: embed_dim must be >= 1");
        if (layers.empty()) throw ConfigError("config: layers must be non-empty");
        for (std::size_t i = 1; i < layers.size(); ++i)
            if (layers[i] <= layers[i - 1])
                throw ConfigError("config: layers must be strictly increasing");
        if (extractor_kind == "surrogate") {
            int side = extractor_spec().resolved_input_size();
            if (side % region_size != 0)
                throw ConfigError("config: region_size must divide extractor input size");
            int grid = side / region_size;
            if (num_areas > 0) {
                if (area_rows > grid || area_cols > grid)
                    throw ConfigError("config: area exceeds token grid");
                int cells = area_rows * area_cols;
                // an area must cover more than one region and less than the frame
                if (cells <= 1 || cells >= grid * grid)
                    throw ConfigError("config: area must be larger than a region and smaller than the grid");
            }
        }
        GeneratorConfig g = generator_config();
        g.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    return out;
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline std::string serialize_config(const TrainConfig& c) {
    std::ostringstream os;
    os << "lambda_global = " << detail::fmt_double(c.lambda_global) << "\n";
    os << "lambda_local = " << detail::fmt_double(c.lambda_local) << "\n";
    os << "lambda_temporal = " << detail::fmt_double(c.lambda_temporal) << "\n";
    os << "delta_t = " << c.delta_t << "\n";
    os << "num_areas = " << c.num_areas << "\n";
    os << "area_rows = " << c.area_rows << "\n";
    os << "area_cols = " << c.area_cols << "\n";
    os << "adv_variant = " << c.adv_variant << "\n";
    os << "scales = " << detail::join_ints(c.scales) << "\n";
    os << "include_scale_one = " << (c.include_scale_one ? "true" : "false") << "\n";
    os << "disc_hidden = " << c.disc_hidden << "\n";
    os << "extractor_kind = " << c.extractor_kind << "\n";
    os << "region_size = " << c.region_size << "\n";
    os << "embed_dim = " << c.embed_dim << "\n";
    os << "extractor_seed = " << c.extractor_seed << "\n";
    os << "extractor_input_size = " << c.extractor_input_size << "\n";
    os << "weights_path = " << c.weights_path << "\n";
    os << "layers = " << detail::join_ints(c.layers) << "\n";
    os << "generator_preset = " << c.generator_preset << "\n";
    os << "resolution = " << c.resolution << "\n";
    os << "input_channels = " << c.input_channels << "\n";
    os << "optimizer = " << c.optimizer << "\n";
    os << "learning_rate = " << detail::fmt_double(c.learning_rate) << "\n";
    os << "beta1 = " << detail::fmt_double(c.beta1) << "\n";
    os << "beta2 = " << detail::fmt_double(c.beta2) << "\n";
    os << "total_steps = " << c.total_steps << "\n";
    os << "seed = " << c.seed << "\n";
    os << "checkpoint_every = " << c.checkpoint_every << "\n";
    os << "log_every = " << c.log_every << "\n";
    os << "data_root = " << c.data_root << "\n";
    return os.str();
}

// applies "key = value" to cfg; line_no only flavors error messages
inline void apply_config_line(TrainConfig& c, const std::string& key, const std::string& value,
                              int line_no) {
    auto err = [line_no](const std::string& msg) {
        return ConfigError("config line " + std::to_string(line_no) + ": " + msg);
    };
    try {
        if (key == "lambda_global") c.lambda_global = std::stod(value);
        else if (key == "lambda_local") c.lambda_local = std::stod(value);
        else if (key == "lambda_temporal") c.lambda_temporal = std::stod(value);
        else if (key == "delta_t") c.delta_t = std::stoi(value);
        else if (key == "num_areas") c.num_areas = std::stoi(value);
        else if (key == "area_rows") c.area_rows = std::stoi(value);
        else if (key == "area_cols") c.area_cols = std::stoi(value);
        else if (key == "adv_variant") c.adv_variant = value;
        else if (key == "scales") c.scales = detail::parse_int_list(value);
        else if (key == "include_scale_one") {
            if (value != "true" && value != "false") throw err("expected true or false");
            c.include_scale_one = value == "true";
        }
        else if (key == "disc_hidden") c.disc_hidden = std::stoi(value);
        else if (key == "extractor_kind") c.extractor_kind = value;
        else if (key == "region_size") c.region_size = std::stoi(value);
        else if (key == "embed_dim") c.embed_dim = std::stoi(value);
        else if (key == "extractor_seed") c.extractor_seed = std::stoull(value);
        else if (key == "extractor_input_size") c.extractor_input_size = std::stoi(value);
        else if (key == "weights_path") c.weights_path = value;
        else if (key == "layers") c.layers = detail::parse_int_list(value);
        else if (key == "generator_preset") c.generator_preset = value;
        else if (key == "resolution") c.resolution = std::stoi(value);
        else if (key == "input_channels") c.input_channels = std::stoi(value);
        else if (key == "optimizer") c.optimizer = value;
        else if (key == "learning_rate") c.learning_rate = std::stod(value);
        else if (key == "beta1") c.beta1 = std::stod(value);
        else if (key == "beta2") c.beta2 = std::stod(value);
        else if (key == "total_steps") c.total_steps = std::stol(value);
        else if (key == "seed") c.seed = std::stoull(value);
        else if (key == "checkpoint_every") c.checkpoint_every = std::stol(value);
        else if (key == "log_every") c.log_every = std::stol(value);
        else if (key == "data_root") c.data_root = value;
        else throw err("unknown key '" + key + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw err("invalid value '" + value + "' for key '" + key + "'");
    }
}

inline TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    std::vector<std::string> seen;
    while (std::getline(is, line)) {
        ++line_no;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        for (const std::string& s : seen)
            if (s == key)
                throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                                  key + "'");
        seen.push_back(key);
        apply_config_line(c, key, value, line_no);
    }
    return c;
}

inline std::uint64_t config_fingerprint(const TrainConfig& c) {
    return fnv1a64(serialize_config(c));
}

} // namespace roma
