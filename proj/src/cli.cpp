#include "icvseg/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "icvseg/checkpoint.hpp"
#include "icvseg/error.hpp"
#include "icvseg/experiment.hpp"
#include "icvseg/keyvalue.hpp"
#include "icvseg/metrics.hpp"
#include "icvseg/phantom.hpp"

namespace icvseg::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDataRootEnv = "ICVSEG_DATA_ROOT";

struct PhantomArgs {
    std::size_t patients = 10;
    std::size_t scans_per_patient = 3;
    std::size_t test_patients = 3;
    std::uint64_t seed = 1;
    std::string extents = "128,128,32";
    std::string radius_mm = "16,26";
    double noise = PhantomConfig{}.noise;
    std::size_t annotated_slices = 10;
    std::string out;
};

struct TrainArgs {
    std::string data;
    std::string composition;
    std::string out;
    std::string profile = "desk";
    std::string patch_sizes;
    double dropout = -1.0;
    double lr = AdamConfig{}.lr;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    std::size_t samples_per_class = 500;
    std::size_t test_patients = 3;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    bool deterministic = false;
};

struct SegmentArgs {
    std::string checkpoint;
    std::vector<std::string> inputs;
    std::string data;
    std::string split = "test";
    std::string out;
    std::size_t stride = 1;
    std::size_t workers = 1;
    std::size_t batch_size = 512;
    int connectivity = 26;
    bool deterministic = false;
};

struct EvaluateArgs {
    std::string reference;
    std::vector<std::string> predictions;
    std::vector<std::string> regimes;
    std::string out;
};

/// Flag values are user input, so malformed numbers are config errors.
template <typename F>
auto flag_value(const char* flag, F&& parse) {
    try {
        return parse();
    } catch (const DataError& e) {
        throw ConfigError(std::string(flag) + ": " + e.what());
    }
}

/// `<dir>/<subcommand>.ini`; `icvseg --config <file> <subcommand>` replays it.
void write_resolved_config(const CLI::App& sub, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream file(dir / (sub.get_name() + ".ini"), std::ios::trunc);
    if (!file) throw DataError("cannot write resolved config into " + dir.string());
    // Unset options are left out so they fall back to their defaults on replay.
    const std::string prefix = sub.get_name() + ".";
    std::istringstream all(sub.get_parent()->config_to_str(true, false));
    for (std::string line; std::getline(all, line);)
        if (line.starts_with(prefix) && !line.ends_with("=\"\"")) file << line << "\n";
}

NetworkSpec resolve_spec(const TrainArgs& a) {
    NetworkSpec spec;
    if (a.profile == "desk") spec = NetworkSpec::desk();
    else if (a.profile == "full") spec = NetworkSpec::full_scale();
    else if (a.profile == "tiny") spec = NetworkSpec::tiny();
    else throw ConfigError("unknown profile '" + a.profile + "' (desk, full, tiny)");
    if (!a.patch_sizes.empty()) {
        const auto sizes = flag_value("--patch-sizes", [&] { return parse_uint_list(a.patch_sizes); });
        if (sizes.size() != kBranches) throw ConfigError("--patch-sizes needs exactly 3 values");
        std::copy(sizes.begin(), sizes.end(), spec.patch_sizes.begin());
    }
    if (a.dropout >= 0.0) spec.dropout_rate = a.dropout;
    spec.validate();
    return spec;
}

int cmd_phantom(const PhantomArgs& a, const CLI::App& sub, std::ostream& out) {
    PhantomConfig base;
    const auto ext = flag_value("--extents", [&] { return parse_uint_list(a.extents); });
    if (ext.size() != 3) throw ConfigError("--extents needs three values x,y,z");
    std::copy(ext.begin(), ext.end(), base.extents.begin());
    const auto radius = split(a.radius_mm, ',');
    if (radius.size() != 2) throw ConfigError("--radius-mm needs two values min,max");
    base.radius_mm = flag_value("--radius-mm", [&] {
        return std::array<double, 2>{parse_double(radius[0]), parse_double(radius[1])};
    });
    base.noise = a.noise;
    base.annotated_slices = a.annotated_slices;
    const PhantomDataset dataset = generate_dataset(a.patients, a.scans_per_patient, a.seed, base);
    if (a.test_patients >= a.patients)
        throw ConfigError("--test-patients must leave at least one training patient");
    const fs::path dir(a.out);
    write_dataset(dir, dataset);
    write_split(dir / "split.txt", split_patients(dataset.patients, a.test_patients));
    write_resolved_config(sub, dir);
    out << "wrote " << dataset.scans.size() << " scans for " << dataset.patients.size() << " patients to "
        << dir.string() << "\n";
    return ok;
}

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
    if (a.data.empty()) throw ConfigError(std::string("no dataset: pass --data or set ") + kDataRootEnv);
    TrainingOptions options;
    options.spec = resolve_spec(a);
    options.adam.lr = a.lr;
    options.epochs = a.epochs;
    options.batch_size = a.batch_size;
    options.samples_per_class = a.samples_per_class;
    options.seed = a.seed;
    if (a.batch_size < 2) throw ConfigError("--batch-size must be at least 2");
    if (a.samples_per_class == 0) throw ConfigError("--samples-per-class must be positive");
    const TrainingComposition composition = TrainingComposition::parse(a.composition);

    const DatasetIndex index = scan_dataset(a.data, a.test_patients);
    const auto chosen = compose_training_set(index, composition);
    const fs::path dir(a.out);
    write_resolved_config(sub, dir);

    const auto scans = load_labeled(chosen);
    out << "training on " << composition.label() << " (" << scans.size() << " scans), "
        << parameter_count(options.spec) << " parameters\n";

    std::ofstream log(dir / "loss.log", std::ios::trunc);
    if (!log) throw DataError("cannot write " + (dir / "loss.log").string());
    log << "# " << composition.label() << "\n";
    const Checkpoint ckpt = train_model(scans, options, [&](std::size_t e, const EpochResult& r) {
        log << "epoch=" << e + 1 << " loss=" << format_double(r.mean_loss) << " samples=" << r.samples
            << " updates=" << r.updates << " rejected=" << r.rejected_updates << "\n";
        log.flush();
        out << "epoch " << e + 1 << "/" << a.epochs << " loss " << format_double(r.mean_loss) << "\n";
    });
    save_checkpoint(dir / "checkpoint.ckpt", ckpt);
    out << "wrote " << (dir / "checkpoint.ckpt").string() << "\n";
    return ok;
}

struct SegmentInput {
    std::string stem;
    fs::path path;
};

std::vector<SegmentInput> segment_inputs(const SegmentArgs& a) {
    std::vector<SegmentInput> inputs;
    for (const auto& p : a.inputs) inputs.push_back({fs::path(p).stem().string(), p});
    if (!a.data.empty()) {
        if (a.split != "test" && a.split != "train" && a.split != "all")
            throw ConfigError("--split must be test, train or all");
        const DatasetIndex index = scan_dataset(a.data);
        for (const auto& s : index.scans) {
            const bool test = index.split.is_test(s.patient_id);
            if (a.split == "all" || test == (a.split == "test")) inputs.push_back({s.id, s.image_path});
        }
    }
    if (inputs.empty()) throw ConfigError("nothing to segment: pass volume paths or --data");
    return inputs;
}

int cmd_segment(SegmentArgs a, const CLI::App& sub, std::ostream& out, std::ostream& err) {
    if (a.deterministic) a.workers = 1;
    SegmentOptions options;
    options.inference.pixel_stride = a.stride;
    options.inference.workers = a.workers;
    options.inference.batch_size = a.batch_size;
    if (a.stride == 0) throw ConfigError("--stride must be positive");
    if (a.connectivity == 6) options.connectivity = Connectivity::six;
    else if (a.connectivity == 26) options.connectivity = Connectivity::twenty_six;
    else throw ConfigError("--connectivity must be 6 or 26");

    if (!fs::exists(a.checkpoint)) throw DataError("checkpoint " + a.checkpoint + " does not exist");
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const auto inputs = segment_inputs(a);
    const fs::path dir(a.out);
    write_resolved_config(sub, dir);

    for (const auto& in : inputs) {
        const Volume image = read_volume(in.path);
        const SegmentResult r = segment_scan(image, ckpt, options);

        Volume prob(image.extents, image.spacing);
        prob.meta.patient_id = image.meta.patient_id;
        prob.meta.orientation = image.meta.orientation;
        prob.voxels = r.probabilities.probs;
        write_volume(dir / (in.stem + "_prob.nii"), prob);

        Volume seg(image.extents, image.spacing);
        seg.storage = VoxelType::int16;
        seg.meta.patient_id = image.meta.patient_id;
        seg.meta.orientation = image.meta.orientation;
        seg.meta.role = VolumeRole::mask;
        for (std::size_t i = 0; i < seg.voxels.size(); ++i) seg.voxels[i] = r.segmentation.mask.voxels[i] ? 1.0f : 0.0f;
        write_volume(dir / (in.stem + "_seg.nii"), seg);

        if (r.segmentation.empty) err << "warning: " << in.stem << ": empty segmentation\n";
        out << in.stem << ": kept " << r.segmentation.kept_size << " voxels of " << r.segmentation.components
            << " component(s)\n";
    }
    return ok;
}

int cmd_evaluate(EvaluateArgs a, const CLI::App& sub, std::ostream& out) {
    if (a.reference.empty()) throw ConfigError(std::string("no reference directory: pass --reference or set ") + kDataRootEnv);
    if (a.regimes.empty())
        for (const auto& p : a.predictions) a.regimes.push_back(fs::path(p).filename().string());
    if (a.regimes.size() != a.predictions.size())
        throw ConfigError("--regime must be given once per --predictions directory");

    MetricsReport report;
    for (std::size_t d = 0; d < a.predictions.size(); ++d) {
        const fs::path pred_dir(a.predictions[d]);
        if (!fs::is_directory(pred_dir)) throw DataError("prediction directory " + pred_dir.string() + " does not exist");
        std::vector<fs::path> preds;
        for (const auto& entry : fs::directory_iterator(pred_dir)) {
            const std::string stem = entry.path().stem().string();
            if (entry.path().extension() == ".nii" && stem.ends_with("_seg")) preds.push_back(entry.path());
        }
        std::sort(preds.begin(), preds.end());
        if (preds.empty()) throw DataError("no <id>_seg.nii predictions in " + pred_dir.string());

        for (const auto& pred_path : preds) {
            const std::string stem = pred_path.stem().string();
            const std::string id = stem.substr(0, stem.size() - 4);
            const fs::path ref_path = fs::path(a.reference) / (id + "_ref.nii");
            if (!fs::exists(ref_path)) throw DataError("prediction " + id + " has no reference " + ref_path.string());
            if (!fs::exists(sidecar_path(ref_path)))
                throw DataError("reference " + ref_path.string() + " has no annotation sidecar");
            const Volume ref_volume = read_volume(ref_path);
            const AnnotatedMask reference = to_mask(ref_volume);
            const Volume pred_volume = read_volume(pred_path);
            if (pred_volume.extents != reference.extents) throw DataError("prediction " + id + ": extents differ from reference");
            BinaryVolume prediction{pred_volume.extents, std::vector<std::uint8_t>(pred_volume.voxels.size())};
            for (std::size_t i = 0; i < prediction.voxels.size(); ++i) prediction.voxels[i] = pred_volume.voxels[i] > 0.5f;

            ScanMetrics m = evaluate_scan(reference, prediction, spacing_mm(ref_volume));
            m.scan_id = id;
            m.patient_id = ref_volume.meta.patient_id;
            m.orientation = ref_volume.meta.orientation;
            report.add(a.regimes[d], std::move(m));
        }
    }

    const fs::path dir(a.out);
    write_resolved_config(sub, dir);
    std::ofstream(dir / "metrics.txt", std::ios::trunc) << report.to_records();
    const std::string table = report.to_table();
    std::ofstream(dir / "table.txt", std::ios::trunc) << table;
    out << table;
    return ok;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-scale patch CNN for intracranial volume segmentation"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Options file, e.g. a resolved config written by an earlier run");

    PhantomArgs pa;
    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
    phantom->add_option("--patients", pa.patients, "Number of patients")->capture_default_str();
    phantom->add_option("--scans-per-patient", pa.scans_per_patient, "Orientations per patient (1-3)")->capture_default_str();
    phantom->add_option("--test-patients", pa.test_patients, "Patients held out in split.txt")->capture_default_str();
    phantom->add_option("--seed", pa.seed, "Base seed")->capture_default_str();
    phantom->add_option("--extents", pa.extents, "Volume extents x,y,z")->capture_default_str();
    phantom->add_option("--radius-mm", pa.radius_mm, "ICV semi-axis range in mm, min,max")->capture_default_str();
    phantom->add_option("--noise", pa.noise, "Gaussian noise level")->capture_default_str();
    phantom->add_option("--annotated-slices", pa.annotated_slices, "Annotated slices per scan")->capture_default_str();
    phantom->add_option("--out", pa.out, "Output directory")->required();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a network on a training-set composition");
    train->add_option("--data", ta.data, "Dataset directory")->envname(kDataRootEnv);
    train->add_option("--composition", ta.composition, "e.g. \"7 axial\" or \"axial=3,coronal=2,sagittal=2\"")->required();
    train->add_option("--out", ta.out, "Output directory")->required();
    train->add_option("--profile", ta.profile, "Network preset: desk, full or tiny")->capture_default_str();
    train->add_option("--patch-sizes", ta.patch_sizes, "Override patch sizes, e.g. 25,45,65");
    train->add_option("--dropout", ta.dropout, "Override dropout rate");
    train->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--epochs", ta.epochs, "Training epochs")->capture_default_str();
    train->add_option("--batch-size", ta.batch_size, "Minibatch size")->capture_default_str();
    train->add_option("--samples-per-class", ta.samples_per_class, "Samples per class per scan per epoch")->capture_default_str();
    train->add_option("--test-patients", ta.test_patients, "Held-out patients when the dataset has no split.txt")->capture_default_str();
    train->add_option("--seed", ta.seed, "Seed for initialization, sampling and dropout")->capture_default_str();
    train->add_option("--workers", ta.workers, "Worker threads")->capture_default_str();
    train->add_flag("--deterministic", ta.deterministic, "Single-threaded bit-reproducible run");

    SegmentArgs sa;
    auto* segment = app.add_subcommand("segment", "Segment volumes with a trained checkpoint");
    segment->add_option("--checkpoint", sa.checkpoint, "Checkpoint file")->required();
    segment->add_option("inputs", sa.inputs, "NIfTI volumes to segment");
    segment->add_option("--data", sa.data, "Segment scans of this dataset instead of (or besides) explicit inputs");
    segment->add_option("--split", sa.split, "Dataset scans to segment: test, train or all")->capture_default_str();
    segment->add_option("--out", sa.out, "Output directory")->required();
    segment->add_option("--stride", sa.stride, "In-plane classification stride")->capture_default_str();
    segment->add_option("--workers", sa.workers, "Worker threads")->capture_default_str();
    segment->add_option("--batch-size", sa.batch_size, "Patches per forward pass")->capture_default_str();
    segment->add_option("--connectivity", sa.connectivity, "Largest-component connectivity: 6 or 26")->capture_default_str();
    segment->add_flag("--deterministic", sa.deterministic, "Force a single worker");

    EvaluateArgs ea;
    auto* evaluate = app.add_subcommand("evaluate", "Score predictions against annotated references");
    evaluate->add_option("--reference", ea.reference, "Dataset directory with <id>_ref.nii")->envname(kDataRootEnv);
    evaluate->add_option("--predictions", ea.predictions, "Directory of <id>_seg.nii (repeatable)")->required();
    evaluate->add_option("--regime", ea.regimes, "Row label per predictions directory (repeatable)");
    evaluate->add_option("--out", ea.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage;
    }

    try {
        if (phantom->parsed()) return cmd_phantom(pa, *phantom, out);
        if (train->parsed()) return cmd_train(ta, *train, out);
        if (segment->parsed()) return cmd_segment(sa, *segment, out, err);
        if (evaluate->parsed()) return cmd_evaluate(ea, *evaluate, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return usage;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return numeric;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return data;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return data;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return data;
    }
    return usage;
}

}  // namespace icvseg::cli
