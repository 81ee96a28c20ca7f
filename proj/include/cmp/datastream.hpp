#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmp/matrix.hpp"
#include "cmp/rng.hpp"

namespace cmp {

enum class DatasetFormat { kVectorsCsv, kImagesRaw };

struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& what, std::size_t byte_offset = 0)
        : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")") {}
};

/// Samples plus class labels. Labels are only ever consumed by the probe;
/// the training path goes through UnlabeledView.
struct Dataset {
    bool is_images = false;
    Matrix vectors;                     // n x dim, vector datasets
    std::vector<std::uint8_t> pixels;   // n * c * h * w, image datasets
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<std::uint32_t> labels;
    std::size_t class_count = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t input_dim() const {
        return is_images ? channels * height * width : vectors.cols();
    }

    void validate() const {
        if (labels.empty()) throw IngestError("dataset is empty");
        if (class_count == 0) throw IngestError("class_count is zero");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] >= class_count)
                throw IngestError("label out of range at sample " + std::to_string(i));
        if (is_images) {
            if (pixels.size() != size() * channels * height * width)
                throw IngestError("pixel payload size mismatch");
        } else if (vectors.rows() != size()) {
            throw IngestError("vector row count != label count");
        }
    }

    /// Raw sample as a flat double vector (pixels scaled to [0,1]).
    std::vector<double> sample(std::size_t id) const {
        std::vector<double> out(input_dim());
        if (is_images) {
            const std::uint8_t* p = pixels.data() + id * input_dim();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] / 255.0;
        } else {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = vectors(id, i);
        }
        return out;
    }
};

/// Label-blind handle to a dataset. The trainer only ever holds one of
/// these, so the training path has no read access to labels by type.
class UnlabeledView {
public:
    explicit UnlabeledView(const Dataset& ds) : ds_(&ds) {}
    std::size_t size() const { return ds_->size(); }
    std::size_t input_dim() const { return ds_->input_dim(); }
    bool is_images() const { return ds_->is_images; }
    std::size_t channels() const { return ds_->channels; }
    std::size_t height() const { return ds_->height; }
    std::size_t width() const { return ds_->width; }
    std::vector<double> sample(std::size_t id) const { return ds_->sample(id); }
    const Dataset& dataset_for_serialization() const { return *ds_; }

private:
    const Dataset* ds_;
};

// ---------------------------------------------------------------------------
// ingestion

inline Dataset load_vectors_csv(std::istream& in) {
    Dataset ds;
    std::string line;
    if (!std::getline(in, line)) throw IngestError("missing csv header");
    std::size_t dim = 0;
    {
        std::stringstream h(line);
        char comma;
        if (!(h >> dim >> comma >> ds.class_count) || comma != ',')
            throw IngestError("bad csv header, expected 'dim,classes'");
    }
    std::vector<double> values;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        std::vector<double> fields;
        while (std::getline(row, cell, ',')) {
            try {
                fields.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IngestError("unparsable cell on line " + std::to_string(lineno));
            }
        }
        if (fields.size() != dim + 1)
            throw IngestError("wrong field count on line " + std::to_string(lineno));
        double lab = fields[0];
        if (lab < 0 || lab != static_cast<double>(static_cast<std::uint32_t>(lab)))
            throw IngestError("bad label on line " + std::to_string(lineno));
        ds.labels.push_back(static_cast<std::uint32_t>(lab));
        values.insert(values.end(), fields.begin() + 1, fields.end());
    }
    if (ds.labels.empty()) throw IngestError("csv contains no samples");
    ds.vectors = Matrix(ds.labels.size(), dim, std::move(values));
    ds.validate();
    return ds;
}

inline void save_vectors_csv(const Dataset& ds, std::ostream& out) {
    out << ds.vectors.cols() << "," << ds.class_count << "\n";
    out.precision(17);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        out << ds.labels[r];
        for (std::size_t c = 0; c < ds.vectors.cols(); ++c) out << "," << ds.vectors(r, c);
        out << "\n";
    }
}

namespace detail {
inline void read_exact(std::istream& in, void* dst, std::size_t n, std::size_t& offset) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw IngestError("truncated file", offset);
    offset += n;
}
inline std::uint32_t read_u32(std::istream& in, std::size_t& offset) {
    std::uint8_t b[4];
    read_exact(in, b, 4, offset);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline void write_u32(std::ostream& out, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
}  // namespace detail

/// "CMPD" image container: magic, n, channels, height, width, class count,
/// raw 8-bit pixels, u32 labels. Little-endian throughout.
inline Dataset load_images_raw(std::istream& in) {
    std::size_t offset = 0;
    char magic[4];
    detail::read_exact(in, magic, 4, offset);
    if (std::memcmp(magic, "CMPD", 4) != 0) throw IngestError("bad magic", 0);
    Dataset ds;
    ds.is_images = true;
    std::uint32_t n = detail::read_u32(in, offset);
    ds.channels = detail::read_u32(in, offset);
    ds.height = detail::read_u32(in, offset);
    ds.width = detail::read_u32(in, offset);
    ds.class_count = detail::read_u32(in, offset);
    ds.pixels.resize(static_cast<std::size_t>(n) * ds.channels * ds.height * ds.width);
    detail::read_exact(in, ds.pixels.data(), ds.pixels.size(), offset);
    ds.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) ds.labels[i] = detail::read_u32(in, offset);
    ds.validate();
    return ds;
}

inline void save_images_raw(const Dataset& ds, std::ostream& out) {
    out.write("CMPD", 4);
    detail::write_u32(out, static_cast<std::uint32_t>(ds.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(ds.channels));
    detail::write_u32(out, static_cast<std::uint32_t>(ds.height));
    detail::write_u32(out, static_cast<std::uint32_t>(ds.width));
    detail::write_u32(out, static_cast<std::uint32_t>(ds.class_count));
    out.write(reinterpret_cast<const char*>(ds.pixels.data()),
              static_cast<std::streamsize>(ds.pixels.size()));
    for (std::uint32_t lab : ds.labels) detail::write_u32(out, lab);
}

inline Dataset load_dataset(const std::string& path, DatasetFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path);
    return format == DatasetFormat::kVectorsCsv ? load_vectors_csv(in) : load_images_raw(in);
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot open " + path + " for writing");
    if (ds.is_images)
        save_images_raw(ds, out);
    else
        save_vectors_csv(ds, out);
}

// ---------------------------------------------------------------------------
// synthetic data

/// Isotropic unit-variance Gaussian clusters, one per class, with mean
/// norm class_sep. Desk-scale stand-in for the image benchmarks.
inline Dataset synth_gaussian_stream(std::size_t classes, std::size_t dim,
                                     std::size_t samples_per_class, double class_sep,
                                     std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("synth_gaussian_stream: need >= 2 classes");
    Dataset ds;
    ds.class_count = classes;
    std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
    for (std::size_t k = 0; k < classes; ++k) {
        Rng rng(hash64(seed, "mean", k));
        double norm = 0.0;
        for (double& v : means[k]) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : means[k]) v = norm > 0 ? v / norm * class_sep : 0.0;
    }
    std::vector<double> values;
    values.reserve(classes * samples_per_class * dim);
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t s = 0; s < samples_per_class; ++s) {
            Rng rng(hash64(seed, "sample", k, s));
            for (std::size_t j = 0; j < dim; ++j) values.push_back(means[k][j] + rng.normal());
            ds.labels.push_back(static_cast<std::uint32_t>(k));
        }
    ds.vectors = Matrix(classes * samples_per_class, dim, std::move(values));
    return ds;
}

/// Stratified class-wise split; second element holds `fraction` of each
/// class (rounded down, at least proportional within one sample).
inline std::pair<Dataset, Dataset> hold_out_validation(const Dataset& ds, double fraction,
                                                       std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("hold_out_validation: fraction must be in (0,1)");
    std::vector<std::vector<std::size_t>> by_class(ds.class_count);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
    std::vector<std::size_t> train_ids, held_ids;
    for (std::size_t k = 0; k < ds.class_count; ++k) {
        auto& ids = by_class[k];
        Rng rng(hash64(seed, "holdout", k));
        rng.shuffle(ids);
        std::size_t take = static_cast<std::size_t>(
            std::floor(fraction * static_cast<double>(ids.size()) + 0.5));
        for (std::size_t i = 0; i < ids.size(); ++i)
            (i < take ? held_ids : train_ids).push_back(ids[i]);
    }
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(held_ids.begin(), held_ids.end());
    auto subset = [&](const std::vector<std::size_t>& ids) {
        Dataset out;
        out.is_images = ds.is_images;
        out.channels = ds.channels;
        out.height = ds.height;
        out.width = ds.width;
        out.class_count = ds.class_count;
        if (ds.is_images) {
            std::size_t px = ds.channels * ds.height * ds.width;
            out.pixels.reserve(ids.size() * px);
            for (std::size_t id : ids)
                out.pixels.insert(out.pixels.end(), ds.pixels.begin() + id * px,
                                  ds.pixels.begin() + (id + 1) * px);
        } else {
            std::vector<double> v;
            v.reserve(ids.size() * ds.vectors.cols());
            for (std::size_t id : ids)
                for (std::size_t c = 0; c < ds.vectors.cols(); ++c) v.push_back(ds.vectors(id, c));
            out.vectors = Matrix(ids.size(), ds.vectors.cols(), std::move(v));
        }
        for (std::size_t id : ids) out.labels.push_back(ds.labels[id]);
        return out;
    };
    return {subset(train_ids), subset(held_ids)};
}

// ---------------------------------------------------------------------------
// stream plan

/// Class-incremental ordering: classes round-robin into splits, samples
/// contiguous by split and shuffled within it. Boundary-free: nothing in
/// the emitted batches says where one split ends.
struct StreamPlan {
    std::size_t split_count = 0;
    std::vector<std::size_t> split_of_class;
    std::vector<std::size_t> sample_order;
    std::uint64_t seed = 0;
};

/// The b_s-sized step payload: sample ids only, no labels, no drift flag.
struct MiniBatch {
    std::size_t step = 0;
    std::vector<std::size_t> sample_ids;
};

inline StreamPlan build_stream_plan(const Dataset& ds, std::size_t split_count,
                                    std::uint64_t seed) {
    if (split_count == 0 || split_count > ds.class_count)
        throw std::invalid_argument("build_stream_plan: split_count must be in [1, class_count]");
    StreamPlan plan;
    plan.split_count = split_count;
    plan.seed = seed;
    plan.split_of_class.resize(ds.class_count);
    for (std::size_t k = 0; k < ds.class_count; ++k)
        plan.split_of_class[k] = k % split_count;
    std::vector<std::vector<std::size_t>> per_split(split_count);
    for (std::size_t i = 0; i < ds.size(); ++i)
        per_split[plan.split_of_class[ds.labels[i]]].push_back(i);
    for (std::size_t s = 0; s < split_count; ++s) {
        Rng rng(hash64(seed, "split-shuffle", s));
        rng.shuffle(per_split[s]);
        plan.sample_order.insert(plan.sample_order.end(), per_split[s].begin(),
                                 per_split[s].end());
    }
    return plan;
}

/// Single-pass partition of the plan order into b_s-sized minibatches; the
/// final batch keeps its natural (smaller) size.
inline std::vector<MiniBatch> make_minibatches(const StreamPlan& plan, std::size_t b_s) {
    if (b_s == 0) throw std::invalid_argument("make_minibatches: b_s must be >= 1");
    std::vector<MiniBatch> out;
    MiniBatch cur;
    for (std::size_t id : plan.sample_order) {
        cur.sample_ids.push_back(id);
        if (cur.sample_ids.size() == b_s) {
            out.push_back(std::move(cur));
            cur = MiniBatch{out.size(), {}};
        }
    }
    if (!cur.sample_ids.empty()) out.push_back(std::move(cur));
    for (std::size_t i = 0; i < out.size(); ++i) out[i].step = i;
    return out;
}

// ---------------------------------------------------------------------------
// augmentation

/// Multi-patch augmentation recipe. The image path does random resized
/// crop + horizontal flip + per-channel brightness jitter; vector data get
/// the additive-noise + coordinate-dropout analogue. The recipe itself is
/// configuration, not a benchmark definition.
struct AugmentConfig {
    double crop_scale_min = 0.25;
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double brightness_jitter = 0.4;  // images: per-channel factor 1 +- jitter
    double noise_sigma = 0.1;        // vectors: additive gaussian noise
    double dropout_prob = 0.1;       // vectors: coordinate dropout

    static AugmentConfig identity() {
        AugmentConfig cfg;
        cfg.crop_scale_min = 1.0;
        cfg.crop_scale_max = 1.0;
        cfg.flip_prob = 0.0;
        cfg.brightness_jitter = 0.0;
        cfg.noise_sigma = 0.0;
        cfg.dropout_prob = 0.0;
        return cfg;
    }

    void validate() const {
        if (!(crop_scale_min > 0.0) || crop_scale_max > 1.0 || crop_scale_min > crop_scale_max)
            throw std::invalid_argument("AugmentConfig: crop scale range must be within (0, 1]");
    }
};

namespace detail {

inline std::vector<double> augment_vector(const std::vector<double>& x,
                                          const AugmentConfig& cfg, Rng& rng) {
    std::vector<double> out = x;
    for (double& v : out) {
        double noise = rng.normal();  // always drawn, keeps the stream aligned
        double drop = rng.next_double();
        v += cfg.noise_sigma * noise;
        if (drop < cfg.dropout_prob) v = 0.0;
    }
    return out;
}

inline std::vector<double> augment_image(const UnlabeledView& view, std::size_t id,
                                         const AugmentConfig& cfg, Rng& rng) {
    const std::size_t c = view.channels(), h = view.height(), w = view.width();
    std::vector<double> x = view.sample(id);
    double scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    double side = std::sqrt(scale);
    std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(side * h + 0.5)));
    std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(side * w + 0.5)));
    ch = std::min(ch, h);
    cw = std::min(cw, w);
    std::size_t y0 = static_cast<std::size_t>(rng.next_below(h - ch + 1));
    std::size_t x0 = static_cast<std::size_t>(rng.next_below(w - cw + 1));
    bool flip = rng.next_double() < cfg.flip_prob;
    std::vector<double> factors(c);
    for (double& f : factors) f = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);

    std::vector<double> out(c * h * w);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < h; ++oy)
            for (std::size_t ox = 0; ox < w; ++ox) {
                // bilinear sample from the crop window, resized back to h x w
                double sy = y0 + (h > 1 ? oy * (ch - 1.0) / (h - 1.0) : 0.0);
                double sx_pos = flip ? (w - 1.0 - ox) : static_cast<double>(ox);
                double sx = x0 + (w > 1 ? sx_pos * (cw - 1.0) / (w - 1.0) : 0.0);
                std::size_t iy = static_cast<std::size_t>(sy);
                std::size_t ix = static_cast<std::size_t>(sx);
                std::size_t iy1 = std::min(iy + 1, h - 1), ix1 = std::min(ix + 1, w - 1);
                double fy = sy - iy, fx = sx - ix;
                auto at = [&](std::size_t yy, std::size_t xx) {
                    return x[ci * h * w + yy * w + xx];
                };
                double v = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix1)) +
                           fy * ((1 - fx) * at(iy1, ix) + fx * at(iy1, ix1));
                v *= factors[ci];
                out[ci * h * w + oy * w + ox] = std::clamp(v, 0.0, 1.0);
            }
    return out;
}

}  // namespace detail

/// N independently augmented variants of one sample. Every patch draws
/// from its own (master_seed, sample id, patch index) derived stream, so
/// results are identical under any evaluation order.
inline std::vector<std::vector<double>> multipatch(const UnlabeledView& view, std::size_t id,
                                                   const AugmentConfig& cfg,
                                                   std::uint64_t master_seed,
                                                   std::size_t n_patches) {
    if (n_patches < 1) throw std::invalid_argument("multipatch: need at least one patch");
    cfg.validate();
    std::vector<std::vector<double>> out;
    out.reserve(n_patches);
    for (std::size_t p = 0; p < n_patches; ++p) {
        Rng rng(hash64(master_seed, "aug", id, p));
        if (view.is_images())
            out.push_back(detail::augment_image(view, id, cfg, rng));
        else
            out.push_back(detail::augment_vector(view.sample(id), cfg, rng));
    }
    return out;
}

inline std::vector<std::vector<double>> two_view(const UnlabeledView& view, std::size_t id,
                                                 const AugmentConfig& cfg,
                                                 std::uint64_t master_seed) {
    return multipatch(view, id, cfg, master_seed, 2);
}

}  // namespace cmp
