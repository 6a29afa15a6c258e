#include "icvseg/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "icvseg/keyvalue.hpp"

namespace icvseg {

namespace {

constexpr char kMagic[8] = {'I', 'C', 'V', 'S', 'E', 'G', 'C', 'K'};
constexpr std::size_t kPreambleSize = sizeof kMagic + 1 + 4;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t len) {
    return std::uint32_t(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(len)));
}

std::vector<const Tensor*> payload_tensors(const Checkpoint& c) {
    std::vector<const Tensor*> out;
    for (const auto& layer : c.params.layers) {
        out.push_back(&layer.weights);
        out.push_back(&layer.bias);
        if (layer.norm) {
            out.push_back(&layer.norm->gamma);
            out.push_back(&layer.norm->beta);
            out.push_back(&layer.norm->running_mean);
            out.push_back(&layer.norm->running_var);
        }
    }
    for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
        out.push_back(&c.adam.m[i]);
        out.push_back(&c.adam.v[i]);
    }
    return out;
}

std::string conv_text(const BranchSpec& b) {
    std::string s;
    for (std::size_t l = 0; l < kConvPerBranch; ++l) {
        if (l) s += ',';
        s += std::to_string(b.conv[l].channels) + ":" + std::to_string(b.conv[l].kernel) + ":" +
             std::to_string(b.conv[l].stride);
    }
    return s;
}

std::string doubles_text(const std::vector<double>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) s += ',';
        s += format_double(values[i]);
    }
    return s;
}

}  // namespace

std::string spec_to_text(const NetworkSpec& spec) {
    KeyValues kv;
    kv.set("spec.patch_sizes", join_uints({spec.patch_sizes.begin(), spec.patch_sizes.end()}));
    for (std::size_t b = 0; b < kBranches; ++b) {
        const std::string prefix = "spec.branch" + std::to_string(b);
        kv.set(prefix + ".conv", conv_text(spec.branches[b]));
        kv.set(prefix + ".dense", join_uints({spec.branches[b].dense.begin(), spec.branches[b].dense.end()}));
    }
    kv.set("spec.classes", std::to_string(kClasses));
    kv.set("spec.dropout_rate", format_double(spec.dropout_rate));
    kv.set("spec.bn_momentum", format_double(spec.bn_momentum));
    kv.set("spec.bn_epsilon", format_double(spec.bn_epsilon));
    return kv.to_string();
}

NetworkSpec spec_from_keyvalues(const KeyValues& kv) {
    NetworkSpec spec;
    auto patches = parse_uint_list(kv.get("spec.patch_sizes"));
    if (patches.size() != kBranches) throw DataError("spec.patch_sizes must list three sizes");
    std::copy(patches.begin(), patches.end(), spec.patch_sizes.begin());
    for (std::size_t b = 0; b < kBranches; ++b) {
        const std::string prefix = "spec.branch" + std::to_string(b);
        auto convs = split(kv.get(prefix + ".conv"), ',');
        if (convs.size() != kConvPerBranch) throw DataError(prefix + ".conv must list three layers");
        for (std::size_t l = 0; l < kConvPerBranch; ++l) {
            auto parts = parse_uint_list(convs[l], ':');
            if (parts.size() != 3) throw DataError(prefix + ".conv entries are channels:kernel:stride");
            spec.branches[b].conv[l] = {parts[0], parts[1], parts[2]};
        }
        auto dense = parse_uint_list(kv.get(prefix + ".dense"));
        if (dense.size() != kDensePerBranch) throw DataError(prefix + ".dense must list two widths");
        std::copy(dense.begin(), dense.end(), spec.branches[b].dense.begin());
    }
    if (parse_uint(kv.get_or("spec.classes", "2")) != kClasses) throw DataError("only two-class networks are supported");
    spec.dropout_rate = parse_double(kv.get("spec.dropout_rate"));
    spec.bn_momentum = parse_double(kv.get("spec.bn_momentum"));
    spec.bn_epsilon = parse_double(kv.get("spec.bn_epsilon"));
    return spec;
}

Checkpoint initial_checkpoint(const NetworkSpec& spec, std::uint64_t seed, AdamConfig adam) {
    Checkpoint c;
    c.spec = spec;
    c.meta.seed = seed;
    c.params = init_params<float>(spec, seed);
    c.adam = AdamState<float>::zeros_like(c.params.trainable(), adam);
    return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    const auto tensors = payload_tensors(c);
    std::size_t floats = 0;
    for (const Tensor* t : tensors) floats += t->size();

    std::string header = spec_to_text(c.spec);
    KeyValues kv;
    kv.set("meta.seed", std::to_string(c.meta.seed));
    kv.set("meta.epoch", std::to_string(c.meta.epoch));
    kv.set("meta.loss_history", doubles_text(c.meta.loss_history));
    kv.set("adam.step_count", std::to_string(c.adam.step_count));
    kv.set("adam.lr", format_double(c.adam.config.lr));
    kv.set("adam.beta1", format_double(c.adam.config.beta1));
    kv.set("adam.beta2", format_double(c.adam.config.beta2));
    kv.set("adam.epsilon", format_double(c.adam.config.epsilon));
    kv.set("payload_floats", std::to_string(floats));
    header += kv.to_string();

    std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
    out.push_back(kCheckpointVersion);
    put_u32(out, std::uint32_t(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    const std::size_t payload_start = out.size();
    out.resize(payload_start + floats * sizeof(float));
    std::uint8_t* dst = out.data() + payload_start;
    for (const Tensor* t : tensors) {
        std::memcpy(dst, t->data().data(), t->size() * sizeof(float));
        dst += t->size() * sizeof(float);
    }
    put_u32(out, crc_of(out.data() + payload_start, floats * sizeof(float)));
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    using Kind = CheckpointError::Kind;
    if (bytes.empty()) throw CheckpointError(Kind::truncated, "checkpoint file is empty");
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        if (bytes.size() < sizeof kMagic && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0)
            throw CheckpointError(Kind::truncated, "checkpoint truncated inside the magic string");
        throw CheckpointError(Kind::magic, "not a checkpoint file (magic mismatch)");
    }
    if (bytes.size() < kPreambleSize) throw CheckpointError(Kind::truncated, "checkpoint truncated in preamble");
    const std::uint8_t version = bytes[sizeof kMagic];
    if (version != kCheckpointVersion)
        throw CheckpointError(Kind::version, "unsupported checkpoint version " + std::to_string(version) +
                                                 " (this build reads version " +
                                                 std::to_string(kCheckpointVersion) + ")");
    const std::size_t header_len = get_u32(bytes.data() + sizeof kMagic + 1);
    if (bytes.size() < kPreambleSize + header_len)
        throw CheckpointError(Kind::truncated, "checkpoint truncated inside the header");

    Checkpoint c;
    KeyValues kv;
    std::size_t declared = 0;
    try {
        kv = KeyValues::parse(std::string_view(reinterpret_cast<const char*>(bytes.data()) + kPreambleSize, header_len));
        c.spec = spec_from_keyvalues(kv);
        c.spec.validate();
        c.meta.seed = parse_uint(kv.get("meta.seed"));
        c.meta.epoch = parse_uint(kv.get("meta.epoch"));
        for (const auto& item : split(kv.get("meta.loss_history"), ','))
            c.meta.loss_history.push_back(parse_double(item));
        c.adam.step_count = parse_uint(kv.get("adam.step_count"));
        c.adam.config.lr = parse_double(kv.get("adam.lr"));
        c.adam.config.beta1 = parse_double(kv.get("adam.beta1"));
        c.adam.config.beta2 = parse_double(kv.get("adam.beta2"));
        c.adam.config.epsilon = parse_double(kv.get("adam.epsilon"));
        declared = parse_uint(kv.get("payload_floats"));
    } catch (const std::runtime_error& e) {
        throw CheckpointError(Kind::header, std::string("malformed checkpoint header: ") + e.what());
    }

    // Shapes come from the spec; the payload must match them exactly.
    c.params = init_params<float>(c.spec, 0);
    c.adam.m.clear();
    c.adam.v.clear();
    for (const Tensor* t : c.params.trainable()) {
        c.adam.m.emplace_back(t->shape());
        c.adam.v.emplace_back(t->shape());
    }
    auto tensors = payload_tensors(c);
    std::size_t expected = 0;
    for (const Tensor* t : tensors) expected += t->size();
    if (declared != expected)
        throw CheckpointError(Kind::arity, "checkpoint declares " + std::to_string(declared) +
                                               " payload floats but the spec needs " + std::to_string(expected));

    const std::size_t payload_start = kPreambleSize + header_len;
    const std::size_t payload_bytes = expected * sizeof(float);
    if (bytes.size() < payload_start + payload_bytes + 4)
        throw CheckpointError(Kind::truncated, "checkpoint payload truncated: " + std::to_string(bytes.size()) +
                                                   " bytes, expected " +
                                                   std::to_string(payload_start + payload_bytes + 4));
    if (bytes.size() > payload_start + payload_bytes + 4)
        throw CheckpointError(Kind::arity, "checkpoint has trailing bytes after the checksum");
    const std::uint32_t stored = get_u32(bytes.data() + payload_start + payload_bytes);
    if (stored != crc_of(bytes.data() + payload_start, payload_bytes))
        throw CheckpointError(Kind::checksum, "checkpoint payload checksum mismatch");

    const std::uint8_t* src = bytes.data() + payload_start;
    for (const Tensor* t : tensors) {
        auto* dst = const_cast<Tensor*>(t);
        std::memcpy(dst->data().data(), src, t->size() * sizeof(float));
        src += t->size() * sizeof(float);
    }
    for (auto& layer : c.params.layers)
        if (layer.norm) layer.norm->stats_ready = true;
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const auto bytes = encode_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace icvseg
