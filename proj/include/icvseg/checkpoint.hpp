#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   magic        8 bytes  "ICVSEGCK"
//   version      1 byte   (currently 1)
//   header_len   uint32
//   header       header_len bytes of key=value text: network spec,
//                training metadata, Adam hyperparameters, payload_floats
//   payload      payload_floats float32 values: for each layer in
//                traversal order weights, bias, and for conv layers gamma,
//                beta, running_mean, running_var; then Adam m and v for
//                every trainable tensor in ParameterSet::trainable() order
//   crc32        uint32 of the payload bytes

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icvseg/adam.hpp"
#include "icvseg/error.hpp"
#include "icvseg/keyvalue.hpp"
#include "icvseg/network.hpp"

namespace icvseg {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TrainingMetadata {
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;
    std::vector<double> loss_history;

    bool operator==(const TrainingMetadata&) const = default;
};

struct Checkpoint {
    NetworkSpec spec;
    TrainingMetadata meta;
    ParameterSet<float> params;
    AdamState<float> adam;
};

class CheckpointError : public DataError {
public:
    enum class Kind { io, truncated, magic, version, header, arity, checksum };

    CheckpointError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Loaded batch-norm statistics are marked ready for infer mode.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Fresh checkpoint: initialized parameters and zeroed Adam moments.
Checkpoint initial_checkpoint(const NetworkSpec& spec, std::uint64_t seed, AdamConfig adam = {});

std::string spec_to_text(const NetworkSpec& spec);
/// Reads the `spec.*` keys written by spec_to_text.
NetworkSpec spec_from_keyvalues(const KeyValues& kv);

}  // namespace icvseg
