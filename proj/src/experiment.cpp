#include "icvseg/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "icvseg/error.hpp"
#include "icvseg/keyvalue.hpp"

namespace icvseg {

namespace {

constexpr std::string_view kReferenceSuffix = "_ref";

std::size_t orientation_slot(Orientation o) { return static_cast<std::size_t>(o); }

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
}

}  // namespace

TrainingComposition::TrainingComposition(std::vector<std::pair<Orientation, std::size_t>> counts) {
    for (const auto& [o, n] : counts) counts_[orientation_slot(o)] += n;
}

TrainingComposition TrainingComposition::parse(const std::string& text) {
    TrainingComposition c;
    const auto items = split(text, ',');
    if (items.empty()) throw ConfigError("empty training composition");
    for (const std::string& item : items) {
        std::string name, count;
        if (auto eq = item.find('='); eq != std::string::npos) {
            name = item.substr(0, eq);
            count = item.substr(eq + 1);
        } else if (auto sp = item.find(' '); sp != std::string::npos) {
            count = item.substr(0, sp);
            name = item.substr(item.find_first_not_of(' ', sp));
        } else {
            throw ConfigError("composition entry '" + item + "' is neither 'orientation=count' nor 'count orientation'");
        }
        try {
            c.counts_[orientation_slot(parse_orientation(split(name, ' ').front()))] += parse_uint(count);
        } catch (const DataError& e) {
            throw ConfigError("bad composition entry '" + item + "': " + e.what());
        }
    }
    if (c.total() == 0) throw ConfigError("training composition selects no scans");
    return c;
}

std::size_t TrainingComposition::count(Orientation o) const { return counts_[orientation_slot(o)]; }

std::size_t TrainingComposition::total() const { return counts_[0] + counts_[1] + counts_[2]; }

std::string TrainingComposition::label() const {
    std::vector<std::string> parts;
    for (Orientation o : kOrientations)
        if (count(o)) parts.push_back(std::to_string(count(o)) + " " + std::string(to_string(o)));
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? ", " : "") + parts[i];
    return s;
}

std::vector<const DatasetScan*> DatasetIndex::select(bool test, Orientation orientation) const {
    std::vector<const DatasetScan*> out;
    for (const auto& s : scans)
        if (s.orientation == orientation && split.is_test(s.patient_id) == test) out.push_back(&s);
    return out;
}

void write_split(const std::filesystem::path& path, const DatasetSplit& split) {
    KeyValues kv;
    kv.set("train", join(split.train_patients));
    kv.set("test", join(split.test_patients));
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << kv.to_string();
}

DatasetIndex scan_dataset(const std::filesystem::path& root, std::size_t default_test_patients) {
    if (!std::filesystem::is_directory(root)) throw DataError("dataset directory " + root.string() + " does not exist");
    DatasetIndex index;
    index.root = root;
    std::vector<std::filesystem::path> refs;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        const auto& p = entry.path();
        if (p.extension() != ".nii") continue;
        const std::string stem = p.stem().string();
        if (stem.size() > kReferenceSuffix.size() && stem.ends_with(kReferenceSuffix)) refs.push_back(p);
    }
    std::sort(refs.begin(), refs.end());
    std::set<std::string> patients;
    for (const auto& ref : refs) {
        const std::string stem = ref.stem().string();
        DatasetScan scan;
        scan.id = stem.substr(0, stem.size() - kReferenceSuffix.size());
        scan.reference_path = ref;
        scan.image_path = root / (scan.id + ".nii");
        if (!std::filesystem::exists(scan.image_path))
            throw DataError("reference " + ref.string() + " has no image " + scan.image_path.string());
        const auto meta = read_sidecar(sidecar_path(scan.image_path));
        if (!meta) throw DataError("image " + scan.image_path.string() + " has no sidecar metadata");
        scan.patient_id = meta->patient_id;
        scan.orientation = meta->orientation;
        patients.insert(scan.patient_id);
        index.scans.push_back(std::move(scan));
    }
    if (index.scans.empty()) throw DataError("no <id>.nii / <id>_ref.nii pairs under " + root.string());

    const auto split_file = root / "split.txt";
    if (std::filesystem::exists(split_file)) {
        std::ifstream in(split_file);
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const KeyValues kv = KeyValues::parse(text);
        index.split.train_patients = split(kv.get("train"), ',');
        index.split.test_patients = split(kv.get("test"), ',');
        for (const auto& p : index.split.train_patients)
            if (index.split.is_test(p)) throw DataError("patient " + p + " is in both train and test splits");
    } else {
        index.split = split_patients({patients.begin(), patients.end()}, default_test_patients);
    }
    return index;
}

std::vector<const DatasetScan*> compose_training_set(const DatasetIndex& index, const TrainingComposition& composition) {
    std::vector<const DatasetScan*> chosen;
    std::vector<std::string> train = index.split.train_patients;
    std::sort(train.begin(), train.end());
    for (Orientation o : kOrientations) {
        const std::size_t wanted = composition.count(o);
        std::size_t taken = 0;
        for (const std::string& patient : train) {
            if (taken == wanted) break;
            for (const auto& s : index.scans)
                if (s.patient_id == patient && s.orientation == o) {
                    chosen.push_back(&s);
                    ++taken;
                    break;
                }
        }
        if (taken < wanted)
            throw ConfigError("composition asks for " + std::to_string(wanted) + " " + std::string(to_string(o)) +
                              " training scans but only " + std::to_string(taken) + " are available");
    }
    return chosen;
}

std::vector<LabeledScan> load_labeled(const std::vector<const DatasetScan*>& scans) {
    std::vector<LabeledScan> out;
    for (const DatasetScan* s : scans) {
        LabeledScan ls;
        ls.id = s->id;
        ls.image = normalize_intensity(read_volume(s->image_path));
        ls.mask = to_mask(read_volume(s->reference_path));
        if (ls.mask.extents != ls.image.extents) throw DataError("scan " + s->id + ": reference extents differ from image");
        out.push_back(std::move(ls));
    }
    return out;
}

Checkpoint train_model(const std::vector<LabeledScan>& scans, const TrainingOptions& options,
                       const EpochCallback& on_epoch) {
    options.spec.validate();
    Checkpoint ckpt = initial_checkpoint(options.spec, options.seed, options.adam);
    if (options.epochs == 0) return ckpt;
    if (scans.empty()) throw DataError("no training scans");
    std::mt19937_64 dropout_rng(epoch_seed(options.seed, ~std::uint64_t{0}));
    for (std::size_t e = 0; e < options.epochs; ++e) {
        const EpochPlan plan = build_epoch_plan(scans, options.samples_per_class, epoch_seed(options.seed, e));
        MinibatchStream stream(scans, plan, options.batch_size, options.spec);
        const EpochResult result = train_epoch(ckpt.params, options.spec, stream, ckpt.adam, dropout_rng);
        ckpt.meta.epoch = e + 1;
        ckpt.meta.loss_history.push_back(result.mean_loss);
        if (on_epoch) on_epoch(e, result);
    }
    return ckpt;
}

SegmentResult segment_scan(const Volume& image, const Checkpoint& checkpoint, const SegmentOptions& options) {
    SegmentResult r;
    r.probabilities = segment_volume(image, checkpoint.params, checkpoint.spec, options.inference);
    r.segmentation = largest_component_3d(threshold(r.probabilities), options.connectivity);
    return r;
}

}  // namespace icvseg
