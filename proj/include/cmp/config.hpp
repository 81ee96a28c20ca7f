#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmp/datastream.hpp"
#include "cmp/models.hpp"
#include "cmp/probe.hpp"
#include "cmp/trainer.hpp"

namespace cmp {

/// Configuration rejection with the offending key attached, so the CLI can
/// emit a field-level message.
struct ConfigError : std::runtime_error {
    std::string key;
    ConfigError(const std::string& k, const std::string& msg)
        : std::runtime_error(k.empty() ? msg : k + ": " + msg), key(k) {}
};

struct DataConfig {
    std::string source;  // "synth", "vectors-csv", "images-raw"
    std::string path;    // file sources
    std::size_t classes = 0, dim = 0, samples_per_class = 0;  // synth
    double class_sep = 0.0;
    double holdout_fraction = 0.2;  // probe test split

    Dataset load(std::uint64_t master_seed) const {
        if (source == "synth")
            return synth_gaussian_stream(classes, dim, samples_per_class, class_sep,
                                         hash64(master_seed, "data"));
        DatasetFormat fmt = source == "vectors-csv" ? DatasetFormat::kVectorsCsv
                                                    : DatasetFormat::kImagesRaw;
        return load_dataset(path, fmt);
    }
};

/// Everything one run needs, parsed from the plain-text dotted key-value
/// format. Paper-relevant hyperparameters have no silent defaults: alpha,
/// beta, eps_sq, n_patches (for multi-patch methods), b_s and lr must be
/// spelled out.
struct ExperimentConfig {
    DataConfig data;
    std::size_t splits = 1;
    StrategyConfig strategy;
    NetworkSpec model;
    ProbeConfig probe;
    std::uint64_t seed = 0;
    std::string out_dir;

    static ExperimentConfig from_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string resolved_text() const;
    std::string config_hash() const;  // stable across seed / out_dir
    void validate() const;

    /// Master seed; the trainer and probe derive their own streams from it.
    void set_seed(std::uint64_t s) {
        seed = s;
        strategy.seed = s;
        probe.seed = hash64(s, "probe");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

/// key = value lines; '#' comments; blank lines ignored.
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("", "line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("", "empty key on line " + std::to_string(lineno));
        if (kv.count(key)) throw ConfigError(key, "duplicate key");
        kv[key] = value;
    }
    return kv;
}

/// Pulls typed values out of the parsed map and tracks which keys were
/// consumed, so leftovers can be rejected by name.
struct KvReader {
    std::map<std::string, std::string> kv;
    std::map<std::string, bool> used;

    bool has(const std::string& key) const { return kv.count(key) > 0; }

    std::string require(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw ConfigError(key, "required key missing");
        used[key] = true;
        return it->second;
    }
    std::optional<std::string> optional(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        used[key] = true;
        return it->second;
    }

    double require_double(const std::string& key) { return to_double(key, require(key)); }
    double optional_double(const std::string& key, double fallback) {
        auto v = optional(key);
        return v ? to_double(key, *v) : fallback;
    }
    std::size_t require_size(const std::string& key) { return to_size(key, require(key)); }
    std::size_t optional_size(const std::string& key, std::size_t fallback) {
        auto v = optional(key);
        return v ? to_size(key, *v) : fallback;
    }
    bool optional_bool(const std::string& key, bool fallback) {
        auto v = optional(key);
        if (!v) return fallback;
        if (*v == "true") return true;
        if (*v == "false") return false;
        throw ConfigError(key, "expected true or false, got '" + *v + "'");
    }
    std::vector<std::size_t> optional_size_list(const std::string& key,
                                                std::vector<std::size_t> fallback) {
        auto v = optional(key);
        if (!v) return fallback;
        std::vector<std::size_t> out;
        std::stringstream ss(*v);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(to_size(key, trim(cell)));
        if (out.empty()) throw ConfigError(key, "expected a comma-separated list");
        return out;
    }

    void reject_unused() const {
        for (const auto& [key, value] : kv)
            if (!used.count(key)) throw ConfigError(key, "unknown key");
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return d;
        } catch (const std::exception&) {
            throw ConfigError(key, "expected a number, got '" + v + "'");
        }
    }
    static std::size_t to_size(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            long long n = std::stoll(v, &pos);
            if (pos != v.size() || n < 0) throw std::invalid_argument("");
            return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
            throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
        }
    }
};

inline std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    detail::KvReader r{detail::parse_kv(text), {}};
    ExperimentConfig cfg;

    cfg.data.source = r.require("data.source");
    if (cfg.data.source == "synth") {
        cfg.data.classes = r.require_size("data.classes");
        cfg.data.dim = r.require_size("data.dim");
        cfg.data.samples_per_class = r.require_size("data.samples_per_class");
        cfg.data.class_sep = r.require_double("data.class_sep");
    } else if (cfg.data.source == "vectors-csv" || cfg.data.source == "images-raw") {
        cfg.data.path = r.require("data.path");
    } else {
        throw ConfigError("data.source",
                          "expected synth, vectors-csv or images-raw, got '" +
                              cfg.data.source + "'");
    }
    cfg.data.holdout_fraction = r.optional_double("data.holdout_fraction", 0.2);
    cfg.splits = r.require_size("stream.splits");

    std::string method = r.require("strategy.method");
    if (method == "finetune") cfg.strategy.method = Method::kFinetune;
    else if (method == "er-reservoir") cfg.strategy.method = Method::kErReservoir;
    else if (method == "er-fifo") cfg.strategy.method = Method::kErFifo;
    else if (method == "cmp") cfg.strategy.method = Method::kCmp;
    else if (method == "emp-ssl") cfg.strategy.method = Method::kEmpSsl;
    else
        throw ConfigError("strategy.method",
                          "expected finetune, er-reservoir, er-fifo, cmp or emp-ssl, got '" +
                              method + "'");

    std::string base = r.optional("strategy.base_ssl").value_or("simsiam");
    if (base == "simsiam") cfg.strategy.base_ssl = BaseSsl::kSimsiam;
    else if (base == "byol") cfg.strategy.base_ssl = BaseSsl::kByol;
    else throw ConfigError("strategy.base_ssl", "expected simsiam or byol, got '" + base + "'");

    cfg.strategy.b_s = r.require_size("strategy.b_s");
    if (cfg.strategy.uses_multipatch()) {
        cfg.strategy.hyper.alpha = r.require_double("strategy.alpha");
        cfg.strategy.hyper.beta = r.require_double("strategy.beta");
        cfg.strategy.hyper.eps_sq = r.require_double("strategy.eps_sq");
        cfg.strategy.hyper.n_patches = r.require_size("strategy.n_patches");
        std::string pooling = r.optional("strategy.tcr_pooling").value_or("per-patch");
        if (pooling == "per-patch") cfg.strategy.hyper.tcr_pooling = TcrPooling::kPerPatchIndex;
        else if (pooling == "pooled") cfg.strategy.hyper.tcr_pooling = TcrPooling::kPooled;
        else
            throw ConfigError("strategy.tcr_pooling",
                              "expected per-patch or pooled, got '" + pooling + "'");
        cfg.strategy.hyper.normalize_before_tcr =
            r.optional_bool("strategy.normalize_before_tcr", true);
    }
    if (cfg.strategy.uses_buffer()) {
        cfg.strategy.buffer_capacity = r.require_size("strategy.buffer_capacity");
        cfg.strategy.replay_k = r.require_size("strategy.replay_k");
    }

    cfg.strategy.lr = r.require_double("optimizer.lr");
    cfg.strategy.momentum = r.optional_double("optimizer.momentum", 0.9);
    cfg.strategy.weight_decay = r.optional_double("optimizer.weight_decay", 1e-4);
    if (cfg.strategy.uses_target())
        cfg.strategy.ema_tau = r.optional_double("optimizer.ema_tau", 0.99);

    std::string backbone = r.optional("model.backbone").value_or("mlp");
    if (backbone == "mlp") cfg.model.backbone = BackboneKind::kMlp;
    else if (backbone == "tiny-conv") cfg.model.backbone = BackboneKind::kTinyConv;
    else throw ConfigError("model.backbone", "expected mlp or tiny-conv, got '" + backbone + "'");
    cfg.model.embed_dim = r.require_size("model.embed_dim");
    if (cfg.model.backbone == BackboneKind::kMlp) {
        cfg.model.mlp_widths = r.optional_size_list("model.mlp_widths", {16, 64});
    } else {
        cfg.model.conv.channels = r.optional_size("model.conv_channels", 1);
        cfg.model.conv.height = r.optional_size("model.conv_height", 16);
        cfg.model.conv.width = r.optional_size("model.conv_width", 16);
        cfg.model.conv.blocks = r.optional_size("model.conv_blocks", 3);
        cfg.model.conv.out_channels = r.optional_size("model.conv_out_channels", 16);
    }
    cfg.model.projector_widths =
        r.optional_size_list("model.projector_widths", {cfg.model.embed_dim});
    cfg.model.predictor_hidden = r.optional_size("model.predictor_hidden", 0);

    cfg.strategy.augment.crop_scale_min = r.optional_double("augment.crop_scale_min", 0.25);
    cfg.strategy.augment.crop_scale_max = r.optional_double("augment.crop_scale_max", 1.0);
    cfg.strategy.augment.flip_prob = r.optional_double("augment.flip_prob", 0.5);
    cfg.strategy.augment.brightness_jitter = r.optional_double("augment.brightness_jitter", 0.4);
    cfg.strategy.augment.noise_sigma = r.optional_double("augment.noise_sigma", 0.1);
    cfg.strategy.augment.dropout_prob = r.optional_double("augment.dropout_prob", 0.1);

    cfg.probe.lr0 = r.optional_double("probe.lr0", 0.05);
    cfg.probe.lr_decay = r.optional_double("probe.lr_decay", 1.0 / 3.0);
    cfg.probe.patience = r.optional_size("probe.patience", 3);
    cfg.probe.max_epochs = r.optional_size("probe.max_epochs", 100);
    cfg.probe.lr_floor = r.optional_double("probe.lr_floor", 1e-4);
    cfg.probe.batch_size = r.optional_size("probe.batch_size", 32);
    cfg.probe.val_fraction = r.optional_double("probe.val_fraction", 0.10);

    cfg.set_seed(r.optional_size("run.seed", 0));
    cfg.out_dir = r.optional("run.out").value_or("");

    r.reject_unused();
    cfg.validate();
    return cfg;
}

inline ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

inline void ExperimentConfig::validate() const {
    try {
        strategy.validate();
        model.validate();
        probe.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("", e.what());
    }
    if (data.source == "synth") {
        if (data.classes < 2) throw ConfigError("data.classes", "need at least 2 classes");
        if (data.dim == 0) throw ConfigError("data.dim", "must be positive");
        if (data.samples_per_class == 0)
            throw ConfigError("data.samples_per_class", "must be positive");
        if (data.dim != model.input_dim() && model.backbone == BackboneKind::kMlp)
            throw ConfigError("model.mlp_widths",
                              "first width must equal data.dim (" +
                                  std::to_string(data.dim) + ")");
    }
    if (!(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0))
        throw ConfigError("data.holdout_fraction", "must be in (0,1)");
    if (splits == 0) throw ConfigError("stream.splits", "must be positive");
}

/// Canonical serialization: stable key order, full double precision. The
/// run directory copy of this text is the reproducibility closure.
inline std::string ExperimentConfig::resolved_text() const {
    using detail::format_double;
    std::ostringstream out;
    out << "data.source = " << data.source << "\n";
    if (data.source == "synth") {
        out << "data.classes = " << data.classes << "\n";
        out << "data.dim = " << data.dim << "\n";
        out << "data.samples_per_class = " << data.samples_per_class << "\n";
        out << "data.class_sep = " << format_double(data.class_sep) << "\n";
    } else {
        out << "data.path = " << data.path << "\n";
    }
    out << "data.holdout_fraction = " << format_double(data.holdout_fraction) << "\n";
    out << "stream.splits = " << splits << "\n";
    out << "strategy.method = " << to_string(strategy.method) << "\n";
    out << "strategy.base_ssl = " << to_string(strategy.base_ssl) << "\n";
    out << "strategy.b_s = " << strategy.b_s << "\n";
    if (strategy.uses_multipatch()) {
        out << "strategy.alpha = " << format_double(strategy.hyper.alpha) << "\n";
        out << "strategy.beta = " << format_double(strategy.hyper.beta) << "\n";
        out << "strategy.eps_sq = " << format_double(strategy.hyper.eps_sq) << "\n";
        out << "strategy.n_patches = " << strategy.hyper.n_patches << "\n";
        out << "strategy.tcr_pooling = "
            << (strategy.hyper.tcr_pooling == TcrPooling::kPerPatchIndex ? "per-patch" : "pooled")
            << "\n";
        out << "strategy.normalize_before_tcr = "
            << (strategy.hyper.normalize_before_tcr ? "true" : "false") << "\n";
    }
    if (strategy.uses_buffer()) {
        out << "strategy.buffer_capacity = " << strategy.buffer_capacity << "\n";
        out << "strategy.replay_k = " << strategy.replay_k << "\n";
    }
    out << "optimizer.lr = " << format_double(strategy.lr) << "\n";
    out << "optimizer.momentum = " << format_double(strategy.momentum) << "\n";
    out << "optimizer.weight_decay = " << format_double(strategy.weight_decay) << "\n";
    if (strategy.uses_target())
        out << "optimizer.ema_tau = " << format_double(strategy.ema_tau) << "\n";
    out << "model.backbone = "
        << (model.backbone == BackboneKind::kMlp ? "mlp" : "tiny-conv") << "\n";
    out << "model.embed_dim = " << model.embed_dim << "\n";
    if (model.backbone == BackboneKind::kMlp) {
        out << "model.mlp_widths = " << detail::join_sizes(model.mlp_widths) << "\n";
    } else {
        out << "model.conv_channels = " << model.conv.channels << "\n";
        out << "model.conv_height = " << model.conv.height << "\n";
        out << "model.conv_width = " << model.conv.width << "\n";
        out << "model.conv_blocks = " << model.conv.blocks << "\n";
        out << "model.conv_out_channels = " << model.conv.out_channels << "\n";
    }
    out << "model.projector_widths = " << detail::join_sizes(model.projector_widths) << "\n";
    out << "model.predictor_hidden = " << model.predictor_hidden << "\n";
    out << "augment.crop_scale_min = " << format_double(strategy.augment.crop_scale_min) << "\n";
    out << "augment.crop_scale_max = " << format_double(strategy.augment.crop_scale_max) << "\n";
    out << "augment.flip_prob = " << format_double(strategy.augment.flip_prob) << "\n";
    out << "augment.brightness_jitter = " << format_double(strategy.augment.brightness_jitter)
        << "\n";
    out << "augment.noise_sigma = " << format_double(strategy.augment.noise_sigma) << "\n";
    out << "augment.dropout_prob = " << format_double(strategy.augment.dropout_prob) << "\n";
    out << "probe.lr0 = " << format_double(probe.lr0) << "\n";
    out << "probe.lr_decay = " << format_double(probe.lr_decay) << "\n";
    out << "probe.patience = " << probe.patience << "\n";
    out << "probe.max_epochs = " << probe.max_epochs << "\n";
    out << "probe.lr_floor = " << format_double(probe.lr_floor) << "\n";
    out << "probe.batch_size = " << probe.batch_size << "\n";
    out << "probe.val_fraction = " << format_double(probe.val_fraction) << "\n";
    out << "run.seed = " << seed << "\n";
    // run.out is deliberately not serialized: the resolved copy lives inside
    // the run directory, and artifacts should not depend on their own path.
    return out.str();
}

/// 64-bit digest of the resolved config with run.* stripped, so seed
/// sweeps of one experiment share a hash (and a table row).
inline std::string ExperimentConfig::config_hash() const {
    std::istringstream in(resolved_text());
    std::string line, canon;
    while (std::getline(in, line))
        if (line.rfind("run.", 0) != 0) canon += line + "\n";
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << detail::fnv1a64(canon);
    return out.str();
}

}  // namespace cmp
