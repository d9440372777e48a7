#pragma once

// Procedural rigid objects, point-splat rendering, occlusion/truncation
// corruption and dataset generation. Stands in for the large benchmark
// datasets so the whole pipeline trains and evaluates at desk scale.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmflow/geometry.hpp"
#include "gmflow/image.hpp"
#include "gmflow/rng.hpp"

namespace gmflow {

struct NoiseSpec {
    double rot_std_deg = 0.0;     // total angular noise std, split across axes
    double trans_std_frac = 0.0;  // translation noise per axis, fraction of |t|
};

struct SceneSample {
    ImageU8 image_target;
    ImageU8 image_rendered;
    std::vector<uint8_t> mask_rendered;  // object pixels of the rendered image
    std::vector<uint8_t> mask_target;    // object pixels of the clean target (pre-corruption)
    Pose pose_gt, pose_init;
    CameraIntrinsics K;
    std::string model_id;
    double occlusion_ratio = 0.0;
    bool truncated = false;
};

// ---------------------------------------------------------------------------
// objects and rendering
// ---------------------------------------------------------------------------

enum class ObjectKind { Box, Cylinder, Icosphere };

const char* object_kind_name(ObjectKind kind);
ObjectKind object_kind_from_name(const std::string& name);

// Dense procedural surface sampling with seeded vertex colors; the cylinder
// gets rotation-invariant colors and the symmetric flag.
ObjectModel make_object(ObjectKind kind, uint64_t seed);

struct RenderResult {
    ImageU8 image;
    std::vector<uint8_t> mask;
};

// Z-buffered 1-pixel point splats with Lambertian shading from a fixed light.
// Background stays black; the mask marks written pixels exactly.
RenderResult render(const ObjectModel& model, const Pose& pose, const CameraIntrinsics& K);

CameraIntrinsics default_intrinsics(int resolution);

// ---------------------------------------------------------------------------
// corruption and noise
// ---------------------------------------------------------------------------

// Occlusion: textured rectangles over target-image object pixels until the
// requested cover ratio is met within +-0.02. Truncation: a crop boundary
// erases 10-40% of the object at one image side. The rendered image is never
// touched.
SceneSample corrupt(const SceneSample& sample, double occlusion_ratio, bool truncation,
                    uint64_t seed);

Pose perturb_pose(const Pose& pose_gt, const NoiseSpec& spec, uint64_t seed);

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

struct DatasetConfig {
    int count = 2000;
    int resolution = 128;
    NoiseSpec noise{15.0, 0.05};
    double occlusion_min = 0.0;
    double occlusion_max = 0.6;
    double truncation_prob = 0.0;
    std::vector<ObjectKind> kinds = {ObjectKind::Box, ObjectKind::Cylinder,
                                     ObjectKind::Icosphere};
    uint64_t seed = 0;
};

// Writes out_dir/manifest.json, out_dir/objects/<id>.json and
// out_dir/samples/%06d/{target.png, rendered.png, mask.png, meta.json};
// returns the manifest's deterministic content hash.
std::string generate_dataset(const DatasetConfig& cfg, const std::string& out_dir);

// Deterministic 80/10/10 split by hashing the sample index.
enum class Split { Train, Val, Test };
Split split_of_index(int64_t index);
const char* split_name(Split s);

// In-memory dataset view; images stay 8-bit until batches are formed.
class Dataset {
public:
    static Dataset load(const std::string& dir);

    const DatasetConfig& config() const { return cfg_; }
    const std::string& dir() const { return dir_; }
    const std::string& content_hash() const { return content_hash_; }
    size_t size() const { return samples_.size(); }
    const SceneSample& sample(size_t i) const { return samples_[i]; }
    const ObjectModel& model_of(const SceneSample& s) const { return models_.at(s.model_id); }
    const std::vector<size_t>& indices(Split s) const;

private:
    DatasetConfig cfg_;
    std::string dir_;
    std::string content_hash_;
    std::vector<SceneSample> samples_;
    std::map<std::string, ObjectModel> models_;
    std::vector<size_t> train_, val_, test_;
};

// One free-standing sample (no disk round trip), used by tests and smoke
// runs; `occlusion` < 0 disables corruption.
SceneSample make_scene_sample(const ObjectModel& model, const std::string& model_id,
                              const DatasetConfig& cfg, uint64_t sample_seed);

}  // namespace gmflow
