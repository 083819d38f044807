#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgen/data.hpp"
#include "pcgen/metrics.hpp"
#include "pcgen/model.hpp"

namespace pcgen {

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2.
/// Throws std::invalid_argument unless 0 <= step <= total and total >= 1.
double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min);

struct LrRange {
    double max = 1e-3;
    double min = 0.0;
};

struct TrainConfig {
    std::int64_t phase1_epochs = 80;
    std::int64_t phase2_epochs = 20;
    LrRange phase1_encoder{1e-5, 0.0};  // patch embedding + encoder layers
    LrRange phase1_rest{1e-4, 0.0};
    LrRange phase2{1e-5, 0.0};  // single group
    std::int64_t batch_size = 8;
    float lambda_depth = 1.0f;
    std::int64_t novel_views = 4;  // K
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 1;  // epochs; 0 disables
    std::int64_t keep_last = 3;
    std::int64_t eval_every = 1;  // epochs; 0 disables
    std::string eval_split = "val";
    std::int64_t freeze_encoder_layers = 6;
    bool freeze_patch_embed = false;
    double clip_norm = 5.0;  // 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    float mask_threshold = 0.5f;
    std::int64_t render_upsample = 5;
    std::uint64_t split_seed = 0;
    std::string phase1_objective = "maps";  // only "maps" is implemented

    static TrainConfig full();
    static TrainConfig desk();

    /// Throws ConfigError naming the offending field and its allowed range.
    void validate() const;
    nlohmann::json to_json() const;
    /// Starts from `base` and overrides the given fields; unknown fields are
    /// a ConfigError.
    static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

/// First/second-moment adaptive optimizer with bias correction. Frozen
/// parameters are never touched.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

    /// One update; `lr_of` gives the learning rate of each parameter.
    void step(std::vector<Param>& params, const std::function<double(const Param&)>& lr_of);
    std::int64_t steps() const { return t_; }
    void reset();

    /// State as checkpoint entries "adam.m.<param>" / "adam.v.<param>".
    std::vector<CheckpointEntry> state_entries() const;
    void load_state(const LoadedCheckpoint& ck, std::int64_t steps);

private:
    double b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<float>> m_, v_;  // float32 so checkpoints hold them exactly
};

/// L2 norm of all trainable gradients; scales them down to `max_norm` when
/// larger (max_norm <= 0 disables). Returns the norm before clipping.
double clip_grad_norm(std::vector<Param>& params, double max_norm);

/// FNV-1a over the bytes of every frozen parameter, in parameter order.
std::uint64_t frozen_checksum(const std::vector<Param>& params);

// --- objectives --------------------------------------------------------------------

struct Objective {
    Tensor total;
    double value = 0.0;
    double mask_bce = 0.0;
    double depth_l1 = 0.0;
    std::vector<double> per_view;  // per fixed (phase 1) or novel (phase 2) view
    std::size_t points = 0;        // phase 2: lifted points
    std::size_t dropped_views = 0;  // phase 2: renders that dropped every point
};

/// Sum over the 8 fixed views of mask_bce + lambda * depth_l1.
Objective phase1_objective(const GeneratorOutput& out, const Sample& s, float lambda_depth);

/// Novel-view GT for phase 2: the GT cloud together with the lifted GT
/// fixed views, rendered at each pose.
std::vector<DepthMaskView> novel_gt_views(const Sample& s, const ViewConfig& views, const std::vector<Pose>& poses,
                                          const RenderConfig& rc, float mask_threshold);

/// Lift the predicted views (mask >= threshold) and compare pseudo-renders
/// at `poses` with `gt` through the joint 2D loss.
Objective phase2_objective(const GeneratorOutput& out, const std::vector<DepthMaskView>& gt,
                           const std::vector<Pose>& poses, const ViewConfig& views, const RenderConfig& rc,
                           float lambda_depth, float mask_threshold);

// --- evaluation ------------------------------------------------------------------------

struct ObjectEval {
    std::string object_id;
    double pred_to_gt_x100 = 0.0;
    double gt_to_pred_x100 = 0.0;
    std::size_t points = 0;
    bool empty = false;  // no predicted points; excluded from the error means
};

struct EvalResult {
    ErrorReport row;  // means; NaN errors when every object is empty
    std::vector<ObjectEval> objects;
    std::size_t flagged = 0;
    std::size_t included = 0;
};

/// Scores predicted views against GT clouds. Point counts average over all
/// objects, errors over non-empty ones.
EvalResult evaluate_predictions(const std::vector<std::string>& ids,
                                const std::vector<std::vector<DepthMaskView>>& predicted,
                                const std::vector<PointCloud>& gt_clouds, const ViewConfig& views,
                                float mask_threshold, const std::string& method, const std::string& phase);

/// generate -> lift -> chamfer x100 and point counts for `indices`.
EvalResult evaluate(Generator& model, const DatasetManifest& data, const std::vector<std::size_t>& indices,
                    float mask_threshold, const std::string& method, const std::string& phase);

// --- training ----------------------------------------------------------------------------

struct StepRecord {
    int phase = 1;
    std::int64_t epoch = 0;
    std::int64_t step = 0;        // global, monotone across phases
    std::int64_t phase_step = 0;  // within the phase
    double loss = 0.0;
    double mask_bce = 0.0;
    double depth_l1 = 0.0;
    double lr_encoder = 0.0;
    double lr_rest = 0.0;
    double grad_norm = 0.0;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<nlohmann::json> events;  // eval / epoch / final records, in order
};

/// Runs the two training phases over a dataset split, writing the JSONL log,
/// checkpoints and wall time under `out_dir` (no files when empty).
///
/// Progress (phase, epoch, global step, optimizer state) is saved with every
/// checkpoint; resume() continues after the checkpointed epoch and replays
/// the rest bitwise, since data order and novel views are pure functions of
/// (seed, phase, epoch/step).
class Trainer {
public:
    Trainer(Generator& model, const DatasetManifest& data, std::vector<std::size_t> train_indices, TrainConfig cfg,
            std::filesystem::path out_dir = {});

    /// Runs the remaining epochs of `phase` (1 or 2).
    TrainLog run_phase(int phase);
    /// Loads a checkpoint written by this trainer.
    void resume(const std::filesystem::path& checkpoint_dir);
    /// Newest checkpoint under out_dir/checkpoints, if any.
    std::optional<std::filesystem::path> latest_checkpoint() const;

    /// Echo sink for human-readable step lines (e.g. stdout); optional.
    void set_echo(std::ostream* out) { echo_ = out; }

    const TrainConfig& config() const { return cfg_; }
    std::int64_t global_step() const { return global_step_; }
    int phase() const { return phase_; }
    std::int64_t epochs_done() const { return epochs_done_; }
    std::uint64_t initial_frozen_checksum() const { return frozen0_; }
    const std::vector<std::size_t>& eval_indices() const { return eval_indices_; }

    /// Objective of `phase` on `batch` at the current parameters, with the
    /// novel views of `phase_step`; no update.
    double objective_value(int phase, const std::vector<std::size_t>& batch, std::int64_t phase_step);

private:
    StepRecord train_step(int phase, std::int64_t epoch, const std::vector<std::size_t>& batch, std::int64_t total_steps);
    double lr_for(const Param& p, int phase, std::int64_t phase_step, std::int64_t total_steps) const;
    std::vector<Pose> novel_poses(int phase, std::int64_t phase_step) const;
    std::int64_t epochs_of(int phase) const;
    std::int64_t batches_per_epoch() const;
    void save_checkpoint(double eval_score);
    void append_log(const nlohmann::json& record);
    RenderConfig render_config() const;
    const Sample& sample(std::size_t index);

    Generator& model_;
    const DatasetManifest& data_;
    std::vector<std::size_t> train_;
    std::vector<std::size_t> eval_indices_;
    TrainConfig cfg_;
    std::filesystem::path out_;
    Adam adam_;
    std::map<std::size_t, Sample> cache_;
    std::ostream* echo_ = nullptr;

    int phase_ = 1;
    std::int64_t epochs_done_ = 0;  // within phase_
    std::int64_t global_step_ = 0;
    std::int64_t step_in_phase_ = 0;
    bool log_open_ = false;
    std::uint64_t frozen0_ = 0;
    double best_ = 0.0;
    bool has_best_ = false;
};

}  // namespace pcgen
