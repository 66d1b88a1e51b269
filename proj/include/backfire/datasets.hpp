#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "backfire/error.hpp"
#include "backfire/io.hpp"
#include "backfire/nn_core.hpp"
#include "backfire/random.hpp"

namespace backfire::data {

using nn::Dims;

/// Pixels stored (row, column, channel) in [0, 1].
using Image = std::vector<double>;

struct LabeledExample {
    Image image;
    int clean_label = 0;
    std::optional<int> poison_label;
    std::optional<int> trigger_id;

    bool poisoned() const noexcept { return trigger_id.has_value(); }
    /// Label used as the training target.
    int target() const noexcept { return poison_label.value_or(clean_label); }

    friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

/// agent_id 0 is the defender; its test split is the validation set.
struct AgentDataset {
    int agent_id = 0;
    std::vector<LabeledExample> train_examples;
    std::vector<LabeledExample> test_examples;
};

struct JointDataset {
    std::vector<AgentDataset> agents;
    double defender_fraction = 0.1;
    int num_classes = 10;
    Dims dims;

    int num_attackers() const noexcept { return static_cast<int>(agents.size()) - 1; }
    const AgentDataset& defender() const { return agents.at(0); }
    AgentDataset& defender() { return agents.at(0); }
    const AgentDataset& attacker(int id) const { return agents.at(static_cast<std::size_t>(id)); }
    AgentDataset& attacker(int id) { return agents.at(static_cast<std::size_t>(id)); }

    std::size_t train_size() const {
        std::size_t n = 0;
        for (const auto& a : agents)
            n += a.train_examples.size();
        return n;
    }

    /// Union of every agent's train split, in agent order.
    std::vector<LabeledExample> all_train() const {
        std::vector<LabeledExample> out;
        out.reserve(train_size());
        for (const auto& a : agents)
            out.insert(out.end(), a.train_examples.begin(), a.train_examples.end());
        return out;
    }
};

struct SplitConfig {
    double attacker_train_fraction = 0.8;
    double defender_train_fraction = 0.8;
    std::uint64_t seed = 3407;
};

inline nn::Batch make_batch(std::span<const LabeledExample> examples, Dims dims, bool use_targets = true) {
    nn::Batch batch;
    batch.dims = dims;
    batch.inputs.reserve(examples.size() * dims.size());
    batch.labels.reserve(examples.size());
    for (const auto& e : examples) {
        if (e.image.size() != dims.size())
            throw ConfigError("example image does not match dataset dims");
        batch.inputs.insert(batch.inputs.end(), e.image.begin(), e.image.end());
        batch.labels.push_back(use_targets ? e.target() : e.clean_label);
    }
    return batch;
}

inline nn::Batch make_image_batch(std::span<const Image> images, Dims dims) {
    nn::Batch batch;
    batch.dims = dims;
    batch.inputs.reserve(images.size() * dims.size());
    for (const auto& img : images) {
        if (img.size() != dims.size())
            throw ConfigError("image does not match dims");
        batch.inputs.insert(batch.inputs.end(), img.begin(), img.end());
    }
    batch.labels.assign(images.size(), 0);
    return batch;
}

/// Class-separable procedural images: class j draws a bright bar whose angle
/// and centre are class specific, then adds N(0, 0.1) pixel noise.
inline std::vector<LabeledExample> generate_synthetic(int num_classes, int per_class, Dims dims, std::uint64_t seed) {
    if (num_classes < 2)
        throw ConfigError("generate_synthetic: need at least 2 classes");
    if (per_class < 1)
        throw ConfigError("generate_synthetic: per_class must be >= 1");
    if (dims.length < 8 || dims.width < 8 || dims.channels < 1)
        throw ConfigError("generate_synthetic: dims too small to place patterns (need >= 8x8)");

    const double h = dims.length, w = dims.width;
    const double radius = std::min(h, w) / 6.0;
    const double half_len = std::min(h, w) * 0.3;
    const double thickness = std::max(0.8, std::min(h, w) / 16.0);

    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(static_cast<std::size_t>(num_classes) * per_class);
    for (int j = 0; j < num_classes; ++j) {
        const double angle = std::numbers::pi * j / num_classes;
        const double place = 2.0 * std::numbers::pi * j / num_classes;
        const double cy = (h - 1) / 2.0 + radius * std::sin(place);
        const double cx = (w - 1) / 2.0 + radius * std::cos(place);
        const double dy = std::sin(angle), dx = std::cos(angle);
        for (int n = 0; n < per_class; ++n) {
            const double jy = rng.uniform(-1.0, 1.0);
            const double jx = rng.uniform(-1.0, 1.0);
            LabeledExample e;
            e.clean_label = j;
            e.image.resize(dims.size());
            for (int r = 0; r < dims.length; ++r)
                for (int c = 0; c < dims.width; ++c) {
                    const double py = r - (cy + jy), px = c - (cx + jx);
                    const double along = py * dy + px * dx;
                    const double across = -py * dx + px * dy;
                    double v = 0.0;
                    if (std::abs(along) <= half_len && std::abs(across) <= thickness)
                        v = 1.0;
                    for (int ch = 0; ch < dims.channels; ++ch) {
                        const double noisy = v + 0.1 * rng.normal();
                        e.image[(static_cast<std::size_t>(r) * dims.width + c) * dims.channels + ch] =
                            std::clamp(noisy, 0.0, 1.0);
                    }
                }
            out.push_back(std::move(e));
        }
    }
    return out;
}

namespace detail {

inline void check_labels(const std::vector<LabeledExample>& examples, int num_classes) {
    for (const auto& e : examples)
        if (e.clean_label < 0 || e.clean_label >= num_classes)
            throw ConfigError("label " + std::to_string(e.clean_label) + " outside [0, " +
                              std::to_string(num_classes) + ")");
}

}  // namespace detail

/// IDX image file (magic 0x00000803) plus IDX label file (magic 0x00000801).
inline std::vector<LabeledExample> load_idx_images(const std::filesystem::path& images_path,
                                                   const std::filesystem::path& labels_path, int num_classes = 10) {
    const auto img_bytes = io::read_file(images_path);
    const auto lbl_bytes = io::read_file(labels_path);
    io::ByteReader img(img_bytes);
    io::ByteReader lbl(lbl_bytes);

    const auto img_magic = img.get_u32_be();
    if (img_magic != 0x00000803)
        throw FormatError("IDX images: bad magic number " + std::to_string(img_magic) + ", expected 2051", 0);
    const auto count = img.get_u32_be();
    const auto rows = img.get_u32_be();
    const auto cols = img.get_u32_be();
    const auto lbl_magic = lbl.get_u32_be();
    if (lbl_magic != 0x00000801)
        throw FormatError("IDX labels: bad magic number " + std::to_string(lbl_magic) + ", expected 2049", 0);
    const auto lcount = lbl.get_u32_be();
    if (lcount != count)
        throw FormatError("IDX labels: count " + std::to_string(lcount) + " does not match image count " +
                              std::to_string(count),
                          4);

    const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
    const std::size_t expected = 16 + static_cast<std::size_t>(count) * pixels;
    if (img_bytes.size() != expected)
        throw FormatError("IDX images: expected length " + std::to_string(expected) + ", actual " +
                              std::to_string(img_bytes.size()),
                          std::min(img_bytes.size(), expected));
    if (lbl_bytes.size() != 8 + static_cast<std::size_t>(count))
        throw FormatError("IDX labels: expected length " + std::to_string(8 + count) + ", actual " +
                              std::to_string(lbl_bytes.size()),
                          std::min<std::size_t>(lbl_bytes.size(), 8 + count));

    std::vector<LabeledExample> out(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        out[i].clean_label = lbl.get<std::uint8_t>();
        out[i].image.resize(pixels);
        const auto* p = img.cursor();
        for (std::size_t j = 0; j < pixels; ++j)
            out[i].image[j] = p[j] / 255.0;
        img.skip(pixels);
    }
    detail::check_labels(out, num_classes);
    return out;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batch: label byte, then 3x1024 channel-major pixels per record.
inline std::vector<LabeledExample> load_cifar10_binary(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        const std::size_t whole = bytes.size() / kCifarRecordBytes;
        throw FormatError("CIFAR-10: expected a multiple of 3073 bytes (" + std::to_string((whole + 1) * kCifarRecordBytes) +
                              " for " + std::to_string(whole + 1) + " records), actual length " +
                              std::to_string(bytes.size()),
                          whole * kCifarRecordBytes);
    }
    const std::size_t count = bytes.size() / kCifarRecordBytes;
    std::vector<LabeledExample> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
        if (rec[0] > 9)
            throw FormatError("CIFAR-10: label " + std::to_string(rec[0]) + " outside [0, 10)", i * kCifarRecordBytes);
        out[i].clean_label = rec[0];
        out[i].image.resize(3072);
        for (int ch = 0; ch < 3; ++ch)
            for (int px = 0; px < 1024; ++px)
                out[i].image[static_cast<std::size_t>(px) * 3 + ch] = rec[1 + ch * 1024 + px] / 255.0;
    }
    return out;
}

/// Self-describing dataset file: "SBD1", k, count, l, w, c (u32 LE), then per
/// example: clean_label, poison flag, poison_label, trigger_id (u8 each) and
/// l*w*c float32 pixels.
struct SbdFile {
    int num_classes = 0;
    Dims dims;
    std::vector<LabeledExample> examples;
};

inline std::string encode_sbd(const SbdFile& file) {
    io::ByteWriter w;
    w.put_bytes("SBD1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(file.num_classes));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(file.examples.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(file.dims.length));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(file.dims.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(file.dims.channels));
    for (const auto& e : file.examples) {
        if (e.image.size() != file.dims.size())
            throw ConfigError("encode_sbd: image size does not match dims");
        if (e.trigger_id && (*e.trigger_id < 0 || *e.trigger_id > 255))
            throw ConfigError("encode_sbd: trigger id does not fit in one byte");
        w.put<std::uint8_t>(static_cast<std::uint8_t>(e.clean_label));
        w.put<std::uint8_t>(e.poisoned() ? 1 : 0);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(e.poison_label.value_or(0)));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(e.trigger_id.value_or(0)));
        for (double v : e.image)
            w.put<float>(static_cast<float>(v));
    }
    return w.bytes();
}

inline SbdFile decode_sbd(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader r(bytes);
    r.need(4);
    if (std::string(reinterpret_cast<const char*>(r.cursor()), 4) != "SBD1")
        throw FormatError("SBD1: bad magic", 0);
    r.skip(4);
    SbdFile file;
    file.num_classes = static_cast<int>(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    file.dims.length = static_cast<int>(r.get<std::uint32_t>());
    file.dims.width = static_cast<int>(r.get<std::uint32_t>());
    file.dims.channels = static_cast<int>(r.get<std::uint32_t>());
    const std::size_t record = 4 + 4 * file.dims.size();
    if (r.remaining() != count * record)
        throw FormatError("SBD1: expected " + std::to_string(count * record) + " record bytes, actual " +
                              std::to_string(r.remaining()),
                          r.position());
    file.examples.resize(count);
    for (auto& e : file.examples) {
        e.clean_label = r.get<std::uint8_t>();
        const bool poisoned = r.get<std::uint8_t>() != 0;
        const int poison_label = r.get<std::uint8_t>();
        const int trigger = r.get<std::uint8_t>();
        if (poisoned) {
            e.poison_label = poison_label;
            e.trigger_id = trigger;
        }
        e.image.resize(file.dims.size());
        for (double& v : e.image)
            v = r.get<float>();
    }
    detail::check_labels(file.examples, file.num_classes);
    return file;
}

inline void write_sbd(const std::filesystem::path& path, const SbdFile& file) {
    io::write_file_atomic(path, encode_sbd(file));
}

inline SbdFile read_sbd(const std::filesystem::path& path) { return decode_sbd(io::read_file(path)); }

/// Stratified allocation: defender gets V_d of each class, attackers split the
/// rest equally (remainders rotate across attackers); each agent is then split
/// train/test per class.
inline JointDataset partition(const std::vector<LabeledExample>& examples, int num_attackers, double defender_fraction,
                              const SplitConfig& split, int num_classes, Dims dims) {
    if (num_attackers < 1)
        throw ConfigError("partition: need at least one attacker");
    if (!(defender_fraction > 0.0 && defender_fraction < 1.0))
        throw ConfigError("partition: defender fraction must be in (0, 1)");
    for (double f : {split.attacker_train_fraction, split.defender_train_fraction})
        if (!(f > 0.0 && f < 1.0))
            throw ConfigError("partition: split fractions must be in (0, 1)");

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const int y = examples[i].clean_label;
        if (y < 0 || y >= num_classes)
            throw ConfigError("partition: label out of range");
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }

    Rng rng(split.seed);
    const auto agents = static_cast<std::size_t>(num_attackers) + 1;
    // per agent, per class: example indices
    std::vector<std::vector<std::vector<std::size_t>>> alloc(agents,
                                                             std::vector<std::vector<std::size_t>>(by_class.size()));
    std::size_t rotate = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        const auto n_def = static_cast<std::size_t>(std::floor(defender_fraction * static_cast<double>(n) + 1e-9));
        const std::size_t rest = n - n_def;
        const std::size_t share = rest / static_cast<std::size_t>(num_attackers);
        if (n_def < 1 || share < 1)
            throw ConfigError("partition: class " + std::to_string(c) + " has too few examples (" + std::to_string(n) +
                              ") to give every agent at least one");
        std::size_t pos = 0;
        alloc[0][c].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_def));
        pos = n_def;
        std::vector<std::size_t> counts(agents, share);
        for (std::size_t extra = rest - share * num_attackers; extra > 0; --extra)
            ++counts[1 + (rotate++ % static_cast<std::size_t>(num_attackers))];
        for (std::size_t a = 1; a < agents; ++a) {
            alloc[a][c].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                               idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[a]));
            pos += counts[a];
        }
    }

    JointDataset joint;
    joint.defender_fraction = defender_fraction;
    joint.num_classes = num_classes;
    joint.dims = dims;
    joint.agents.resize(agents);
    for (std::size_t a = 0; a < agents; ++a) {
        AgentDataset& agent = joint.agents[a];
        agent.agent_id = static_cast<int>(a);
        const double frac = a == 0 ? split.defender_train_fraction : split.attacker_train_fraction;
        for (const auto& idx : alloc[a]) {
            const auto n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(idx.size())));
            for (std::size_t i = 0; i < idx.size(); ++i)
                (i < n_train ? agent.train_examples : agent.test_examples).push_back(examples[idx[i]]);
        }
        rng.shuffle(agent.train_examples);
        rng.shuffle(agent.test_examples);
    }
    return joint;
}

}  // namespace backfire::data
