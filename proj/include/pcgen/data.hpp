#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgen/geometry.hpp"
#include "pcgen/tensor.hpp"

namespace pcgen {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ShapeKind { cube, box_stack, chair_proxy, sphere };

const char* shape_kind_name(ShapeKind kind);
/// Throws std::invalid_argument for an unknown name.
ShapeKind parse_shape_kind(const std::string& name);
std::vector<ShapeKind> all_shape_kinds();

struct Sample {
    std::string object_id;
    std::string category;
    Tensor rgb;                                 // [3, S, S] in [0, 1]
    std::vector<DepthMaskView> gt_views_fixed;  // 8 binary-mask views
    PointCloud gt_cloud;                        // normalized to [-0.5, 0.5]^3
    PointCloud dense_cloud;  // synthetic only: the cloud the views were rendered from
    float input_azimuth_deg = 0.0f;
    float input_elevation_deg = 0.0f;
};

struct SynthConfig {
    ViewConfig views;  // image size, radius, ring elevation
    std::size_t cloud_points = 10000;
    std::size_t dense_points = 0;  // 0 -> max(1e4, 40 * S^2)
};

/// Parametric shape -> uniform surface samples (GT cloud and a denser cloud
/// for rendering), fixed-view depth/mask by z-buffer rendering and an RGB
/// proxy (shaded depth from a seeded random viewpoint). Pure function of
/// (kind, seed, config).
Sample synth_object(ShapeKind kind, std::uint64_t seed, const SynthConfig& cfg);

/// Center + uniformly scale so the cloud fits [-0.5, 0.5]^3 and touches the
/// bound on its widest axis. Returns the (center, scale) applied.
std::pair<Vec3, double> normalize_cloud(PointCloud& pc);

/// Largest |coordinate| and whether every point is inside [-0.5-tol, 0.5+tol]^3.
struct CloudFit {
    float max_abs = 0.0f;
    bool inside = false;
};
CloudFit cloud_fit(const PointCloud& pc, float tol);

// --- on-disk dataset -------------------------------------------------------------
//
// root/manifest.json + root/<id>/{rgb,depth,mask,cloud}.tnsr, with rgb
// [3,S,S], depth and mask [8,S,S], cloud [N,3].

struct ObjectEntry {
    std::string id;
    std::string category;
    float input_azimuth_deg = 0.0f;
    float input_elevation_deg = 0.0f;
};

enum class Split { train, val, test, all };
const char* split_name(Split s);
Split parse_split(const std::string& name);

struct DatasetManifest {
    std::filesystem::path root;
    int image_size = 0;
    ViewConfig views;
    std::vector<ObjectEntry> objects;  // valid objects only
    std::vector<std::string> categories;
    /// Objects that failed validation, with the reason (never silently skipped).
    std::vector<std::pair<std::string, std::string>> corrupt;
    std::uint64_t split_seed = 0;
    std::vector<std::size_t> train, val, test;  // indices into objects

    const std::vector<std::size_t>& indices(Split s) const;
    std::vector<std::size_t> all_indices() const;
};

/// Writes one object directory; creates root if needed.
void write_sample(const std::filesystem::path& root, const Sample& s);
/// Writes root/manifest.json listing `objects` (already written).
void write_manifest(const std::filesystem::path& root, int image_size, const ViewConfig& views,
                    const std::vector<ObjectEntry>& objects);

/// Reads and validates the manifest and every object's files. Throws
/// DataError when the root or manifest is unusable (message lists the
/// expected layout); per-object problems land in `corrupt`. Splits are
/// 80/10/10 by object under `split_seed`.
DatasetManifest load_dataset(const std::filesystem::path& root, std::uint64_t split_seed);
Sample load_sample(const DatasetManifest& m, std::size_t index);

/// Deterministic split of n objects: train/val/test index lists.
void split_indices(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val, std::vector<std::size_t>& test);

/// Epoch-wise batches over `items`, shuffled by (seed, epoch); the final
/// partial batch is included.
class BatchIterator {
public:
    BatchIterator(std::vector<std::size_t> items, std::size_t batch_size, std::uint64_t shuffle_seed,
                  std::uint64_t epoch, bool shuffle = true);
    bool has_next() const { return pos_ < order_.size(); }
    std::vector<std::size_t> next();
    std::size_t batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t pos_ = 0;
};

/// Views stacked as [8, S, S] tensors (depth, mask) and back.
Tensor stack_depth(const std::vector<DepthMaskView>& views);
Tensor stack_mask(const std::vector<DepthMaskView>& views);

/// Worst-case lateral offset, in world units, between a back-projected pixel
/// center and the surface point that produced its depth: depth * (sqrt2/2) / f.
double half_pixel_offset(double depth, const Intrinsics& K);

}  // namespace pcgen
