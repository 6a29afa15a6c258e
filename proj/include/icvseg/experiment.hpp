#pragma once

// Library side of the command line: dataset discovery on disk, training
// set composition, and the training loop that ties sampling, the network
// and the optimizer together.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "icvseg/checkpoint.hpp"
#include "icvseg/inference.hpp"
#include "icvseg/network.hpp"
#include "icvseg/sampling.hpp"
#include "icvseg/volume.hpp"

namespace icvseg {

/// Orientation -> scan count, e.g. "7 axial, 7 coronal, 7 sagittal".
class TrainingComposition {
public:
    TrainingComposition() = default;
    explicit TrainingComposition(std::vector<std::pair<Orientation, std::size_t>> counts);

    /// Accepts "axial=7,coronal=2" or the label form "7 axial, 2 coronal".
    static TrainingComposition parse(const std::string& text);

    std::size_t count(Orientation o) const;
    std::size_t total() const;
    /// Row label in axial, coronal, sagittal order, zero counts omitted.
    std::string label() const;

private:
    std::array<std::size_t, 3> counts_{};
};

struct DatasetScan {
    std::string id;
    std::filesystem::path image_path;
    std::filesystem::path reference_path;
    std::string patient_id;
    Orientation orientation = Orientation::axial;
};

struct DatasetIndex {
    std::filesystem::path root;
    std::vector<DatasetScan> scans;
    DatasetSplit split;

    std::vector<const DatasetScan*> select(bool test, Orientation orientation) const;
};

/// Finds `<id>.nii` + `<id>_ref.nii` pairs under `root`. The patient split
/// comes from `split.txt` (train=/test= lists) or, failing that, the last
/// `default_test_patients` patient ids.
DatasetIndex scan_dataset(const std::filesystem::path& root, std::size_t default_test_patients = 3);
void write_split(const std::filesystem::path& path, const DatasetSplit& split);

/// First `count(o)` training patients (sorted) that have a scan of o.
/// Throws ConfigError when a composition asks for more than exists.
std::vector<const DatasetScan*> compose_training_set(const DatasetIndex& index, const TrainingComposition& composition);

/// Loads, normalizes and pairs each scan with its reference.
std::vector<LabeledScan> load_labeled(const std::vector<const DatasetScan*>& scans);

struct TrainingOptions {
    NetworkSpec spec = NetworkSpec::desk();
    AdamConfig adam;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    std::size_t samples_per_class = 500;
    std::uint64_t seed = 1;
};

using EpochCallback = std::function<void(std::size_t epoch, const EpochResult& result)>;

/// Balanced per-epoch plans (epoch e seeded by epoch_seed(seed, e)) and one
/// Adam update per minibatch. Zero epochs returns the initial checkpoint.
Checkpoint train_model(const std::vector<LabeledScan>& scans, const TrainingOptions& options,
                       const EpochCallback& on_epoch = {});

struct SegmentOptions {
    InferenceOptions inference;
    Connectivity connectivity = Connectivity::twenty_six;
};

struct SegmentResult {
    ProbabilityVolume probabilities;
    SegmentationMask segmentation;
};

SegmentResult segment_scan(const Volume& image, const Checkpoint& checkpoint, const SegmentOptions& options);

}  // namespace icvseg
