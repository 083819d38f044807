#include "pcgen/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pcgen/checkpoint.hpp"
#include "pcgen/ops.hpp"
#include "pcgen/render.hpp"

namespace pcgen {

namespace fs = std::filesystem;
using nlohmann::json;

double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
    if (total < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total)
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

// --- config ------------------------------------------------------------------------------

TrainConfig TrainConfig::full() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.phase1_epochs = 60;
    c.phase2_epochs = 10;
    c.phase1_encoder = {3e-4, 1e-6};
    c.phase1_rest = {3e-3, 1e-5};
    c.phase2 = {1e-5, 1e-6};
    c.batch_size = 4;
    c.freeze_encoder_layers = 1;
    return c;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& range) {
        throw ConfigError("train." + field + " must be " + range);
    };
    if (phase1_epochs < 0) fail("phase1_epochs", ">= 0");
    if (phase2_epochs < 0) fail("phase2_epochs", ">= 0");
    auto lr_ok = [&](const LrRange& r, const std::string& name) {
        if (!std::isfinite(r.min) || r.min < 0.0) fail(name + ".min", ">= 0");
        if (!std::isfinite(r.max) || r.max < r.min) fail(name + ".max", ">= " + name + ".min");
    };
    lr_ok(phase1_encoder, "phase1_encoder_lr");
    lr_ok(phase1_rest, "phase1_rest_lr");
    lr_ok(phase2, "phase2_lr");
    if (phase1_encoder.max > phase1_rest.max) fail("phase1_encoder_lr.max", "<= phase1_rest_lr.max");
    if (batch_size < 1) fail("batch_size", ">= 1");
    if (!std::isfinite(lambda_depth) || lambda_depth < 0.0f) fail("lambda_depth", ">= 0");
    if (novel_views < 1 || novel_views > 64) fail("novel_views", "in [1, 64]");
    if (checkpoint_every < 0) fail("checkpoint_every", ">= 0");
    if (keep_last < 1) fail("keep_last", ">= 1");
    if (eval_every < 0) fail("eval_every", ">= 0");
    if (eval_split != "train" && eval_split != "val" && eval_split != "test" && eval_split != "all")
        fail("eval_split", "one of train, val, test, all");
    if (freeze_encoder_layers < 0) fail("freeze_encoder_layers", ">= 0");
    if (!std::isfinite(clip_norm) || clip_norm < 0.0) fail("clip_norm", ">= 0 (0 disables)");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps", "> 0");
    if (!(mask_threshold > 0.0f && mask_threshold < 1.0f)) fail("mask_threshold", "in (0, 1)");
    if (render_upsample < 1 || render_upsample > 16) fail("render_upsample", "in [1, 16]");
    if (phase1_objective != "maps") fail("phase1_objective", "\"maps\" (the only implemented objective)");
}

json TrainConfig::to_json() const {
    auto lr = [](const LrRange& r) { return json{{"max", r.max}, {"min", r.min}}; };
    return {{"phase1_epochs", phase1_epochs},
            {"phase2_epochs", phase2_epochs},
            {"phase1_encoder_lr", lr(phase1_encoder)},
            {"phase1_rest_lr", lr(phase1_rest)},
            {"phase2_lr", lr(phase2)},
            {"batch_size", batch_size},
            {"lambda_depth", lambda_depth},
            {"novel_views", novel_views},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"keep_last", keep_last},
            {"eval_every", eval_every},
            {"eval_split", eval_split},
            {"freeze_encoder_layers", freeze_encoder_layers},
            {"freeze_patch_embed", freeze_patch_embed},
            {"clip_norm", clip_norm},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"mask_threshold", mask_threshold},
            {"render_upsample", render_upsample},
            {"split_seed", split_seed},
            {"phase1_objective", phase1_objective}};
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    TrainConfig c = base;
    const json known = base.to_json();
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError("unknown train field '" + key + "'");
        try {
            if (key.ends_with("_lr")) {
                if (!value.is_object()) throw ConfigError("train." + key + " must be an object {max, min}");
                for (const auto& [k, v] : value.items())
                    if (k != "max" && k != "min") throw ConfigError("unknown field train." + key + "." + k);
                LrRange& r = key == "phase1_encoder_lr" ? c.phase1_encoder : key == "phase1_rest_lr" ? c.phase1_rest : c.phase2;
                r.max = value.value("max", r.max);
                r.min = value.value("min", r.min);
                continue;
            }
            const auto want = known.at(key).type();
            const bool numeric = value.is_number() && known.at(key).is_number();
            if (value.type() != want && !numeric)
                throw ConfigError("train." + key + " has the wrong type (expected " + std::string(known.at(key).type_name()) + ")");
            if (known.at(key).is_number_integer() && !value.is_number_integer())
                throw ConfigError("train." + key + " must be an integer");
            if (key == "phase1_epochs") c.phase1_epochs = value;
            else if (key == "phase2_epochs") c.phase2_epochs = value;
            else if (key == "batch_size") c.batch_size = value;
            else if (key == "lambda_depth") c.lambda_depth = value;
            else if (key == "novel_views") c.novel_views = value;
            else if (key == "seed") c.seed = value;
            else if (key == "checkpoint_every") c.checkpoint_every = value;
            else if (key == "keep_last") c.keep_last = value;
            else if (key == "eval_every") c.eval_every = value;
            else if (key == "eval_split") c.eval_split = value;
            else if (key == "freeze_encoder_layers") c.freeze_encoder_layers = value;
            else if (key == "freeze_patch_embed") c.freeze_patch_embed = value;
            else if (key == "clip_norm") c.clip_norm = value;
            else if (key == "adam_beta1") c.adam_beta1 = value;
            else if (key == "adam_beta2") c.adam_beta2 = value;
            else if (key == "adam_eps") c.adam_eps = value;
            else if (key == "mask_threshold") c.mask_threshold = value;
            else if (key == "render_upsample") c.render_upsample = value;
            else if (key == "split_seed") c.split_seed = value;
            else if (key == "phase1_objective") c.phase1_objective = value;
        } catch (const json::exception& e) {
            throw ConfigError("train." + key + ": " + e.what());
        }
    }
    return c;
}

// --- optimizer -------------------------------------------------------------------------

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Adam::step(std::vector<Param>& params, const std::function<double(const Param&)>& lr_of) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& p : params) {
        if (p.frozen) continue;
        const double lr = lr_of(p);
        auto& m = m_[p.name];
        auto& v = v_[p.name];
        const std::size_t n = p.value.numel();
        if (m.empty()) {
            m.assign(n, 0.0f);
            v.assign(n, 0.0f);
        }
        const bool has = p.value.has_grad();
        const auto g = has ? p.value.grad() : std::span<const float>{};
        auto w = p.value.mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = has ? g[i] : 0.0;
            m[i] = static_cast<float>(b1_ * m[i] + (1.0 - b1_) * gi);
            v[i] = static_cast<float>(b2_ * v[i] + (1.0 - b2_) * gi * gi);
            const double mh = m[i] / c1, vh = v[i] / c2;
            w[i] = static_cast<float>(w[i] - lr * mh / (std::sqrt(vh) + eps_));
        }
    }
}

std::vector<CheckpointEntry> Adam::state_entries() const {
    std::vector<CheckpointEntry> out;
    for (const auto& [name, m] : m_) {
        const auto n = static_cast<std::int64_t>(m.size());
        out.push_back({"adam.m." + name, Tensor::from_data({n}, m), false});
        out.push_back({"adam.v." + name, Tensor::from_data({n}, v_.at(name)), false});
    }
    return out;
}

void Adam::load_state(const LoadedCheckpoint& ck, std::int64_t steps) {
    reset();
    t_ = steps;
    for (const auto& e : ck.entries) {
        if (e.name.rfind("adam.m.", 0) == 0) m_[e.name.substr(7)] = e.tensor.vec();
        else if (e.name.rfind("adam.v.", 0) == 0) v_[e.name.substr(7)] = e.tensor.vec();
    }
    for (const auto& [name, m] : m_)
        if (!v_.count(name) || v_.at(name).size() != m.size())
            throw CheckpointError("optimizer state for '" + name + "' is incomplete");
}

double clip_grad_norm(std::vector<Param>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (p.frozen || !p.value.has_grad()) continue;
        for (float g : p.value.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            if (p.frozen || !p.value.has_grad()) continue;
            for (auto& g : p.value.mutable_grad()) g = static_cast<float>(g * s);
        }
    }
    return norm;
}

std::uint64_t frozen_checksum(const std::vector<Param>& params) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        if (!p.frozen) continue;
        for (float f : p.value.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof bits);
            for (int b = 0; b < 4; ++b) {
                h ^= (bits >> (8 * b)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

// --- objectives ---------------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << v;
    return s.str();
}

}  // namespace

Objective phase1_objective(const GeneratorOutput& out, const Sample& s, float lambda_depth) {
    const auto depth = out.depth();
    const auto logits = out.mask_logits();
    const auto V = depth.dim(0), H = depth.dim(1), W = depth.dim(2);
    if (s.gt_views_fixed.size() != static_cast<std::size_t>(V)) throw DataError("sample has the wrong number of views");
    Objective o;
    for (std::int64_t v = 0; v < V; ++v) {
        const auto& gt = s.gt_views_fixed[static_cast<std::size_t>(v)];
        if (gt.height != H || gt.width != W)
            throw DataError("GT view is " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + ", model emits " +
                            std::to_string(H) + "x" + std::to_string(W));
        const auto d = reshape(slice(depth, 0, v, 1), {H, W});
        const auto l = reshape(slice(logits, 0, v, 1), {H, W});
        const auto mb = mask_bce(l, gt.mask);
        const auto dl = depth_l1(d, gt.depth, gt.mask);
        const auto t = add(mb, scale(dl, lambda_depth));
        o.total = o.total.defined() ? add(o.total, t) : t;
        o.mask_bce += mb.item();
        o.depth_l1 += dl.item();
        o.per_view.push_back(t.item());
    }
    o.value = o.total.item();
    return o;
}

std::vector<DepthMaskView> novel_gt_views(const Sample& s, const ViewConfig& views, const std::vector<Pose>& poses,
                                          const RenderConfig& rc, float mask_threshold) {
    RenderConfig c = rc;
    c.upsample = 1;
    PointCloud cloud = s.gt_cloud;
    if (!s.gt_views_fixed.empty()) {
        const auto lifted = backproject(s.gt_views_fixed, make_fixed_views(views).fixed_views, mask_threshold);
        cloud.xyz.insert(cloud.xyz.end(), lifted.xyz.begin(), lifted.xyz.end());
    }
    std::vector<DepthMaskView> out;
    for (const auto& p : poses) {
        auto v = brute_force_render(cloud, p, c).view;
        v.mask_is_probability = false;
        out.push_back(std::move(v));
    }
    return out;
}

Objective phase2_objective(const GeneratorOutput& out, const std::vector<DepthMaskView>& gt,
                           const std::vector<Pose>& poses, const ViewConfig& views, const RenderConfig& rc,
                           float lambda_depth, float mask_threshold) {
    const auto fixed = make_fixed_views(views).fixed_views;
    const auto depth = out.depth();
    const auto bp = backproject(depth, out.mask_prob(), fixed, mask_threshold);
    Tensor logits;
    if (bp.points.defined()) logits = index_select_flat(out.mask_logits(), bp.pixel);
    auto lb = joint_2d_loss(bp.points, logits, gt, poses, rc, lambda_depth);
    Objective o;
    o.total = lb.total;
    o.value = lb.total_value;
    o.mask_bce = lb.mask_bce;
    o.depth_l1 = lb.depth_l1;
    for (const auto& v : lb.per_view) o.per_view.push_back(v.mask_bce + lambda_depth * v.depth_l1);
    o.points = bp.pixel.size();
    o.dropped_views = lb.all_dropped_views();
    return o;
}

// --- evaluation --------------------------------------------------------------------------

EvalResult evaluate_predictions(const std::vector<std::string>& ids,
                                const std::vector<std::vector<DepthMaskView>>& predicted,
                                const std::vector<PointCloud>& gt_clouds, const ViewConfig& views,
                                float mask_threshold, const std::string& method, const std::string& phase) {
    if (ids.size() != predicted.size() || ids.size() != gt_clouds.size())
        throw std::invalid_argument("evaluate_predictions: ids, predictions and GT clouds differ in count");
    const auto fixed = make_fixed_views(views).fixed_views;
    EvalResult r;
    r.row.method = method;
    r.row.phase = phase;
    double p2g = 0.0, g2p = 0.0, pts = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ObjectEval e;
        e.object_id = ids[i];
        e.points = count_generated_points(predicted[i], mask_threshold);
        const auto cloud = backproject(predicted[i], fixed, mask_threshold);
        pts += static_cast<double>(e.points);
        if (cloud.empty() || gt_clouds[i].empty()) {
            e.empty = true;
            ++r.flagged;
        } else {
            const auto c = chamfer_bidirectional(cloud, gt_clouds[i]);
            e.pred_to_gt_x100 = 100.0 * c.pred_to_gt;
            e.gt_to_pred_x100 = 100.0 * c.gt_to_pred;
            p2g += e.pred_to_gt_x100;
            g2p += e.gt_to_pred_x100;
            ++r.included;
        }
        r.objects.push_back(e);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.row.pred_to_gt_x100 = r.included ? p2g / static_cast<double>(r.included) : nan;
    r.row.gt_to_pred_x100 = r.included ? g2p / static_cast<double>(r.included) : nan;
    r.row.points = ids.empty() ? 0.0 : pts / static_cast<double>(ids.size());
    return r;
}

EvalResult evaluate(Generator& model, const DatasetManifest& data, const std::vector<std::size_t>& indices,
                    float mask_threshold, const std::string& method, const std::string& phase) {
    std::vector<std::string> ids;
    std::vector<std::vector<DepthMaskView>> preds;
    std::vector<PointCloud> gts;
    NoGradGuard ng;
    for (auto idx : indices) {
        const auto s = load_sample(data, idx);
        const auto out = model.generate(s.rgb, false);
        ids.push_back(s.object_id);
        preds.push_back(out.to_views());
        gts.push_back(s.gt_cloud);
    }
    return evaluate_predictions(ids, preds, gts, data.views, mask_threshold, method, phase);
}

// --- trainer ---------------------------------------------------------------------------------

json StepRecord::to_json() const {
    return {{"event", "step"},     {"phase", phase},       {"epoch", epoch},           {"step", step},
            {"phase_step", phase_step}, {"loss", loss},     {"mask_bce", mask_bce},     {"depth_l1", depth_l1},
            {"lr_encoder", lr_encoder}, {"lr_rest", lr_rest}, {"grad_norm", grad_norm}, {"warnings", warnings}};
}

Trainer::Trainer(Generator& model, const DatasetManifest& data, std::vector<std::size_t> train_indices, TrainConfig cfg,
                 fs::path out_dir)
    : model_(model),
      data_(data),
      train_(std::move(train_indices)),
      cfg_(std::move(cfg)),
      out_(std::move(out_dir)),
      adam_(cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training split is empty");
    for (auto i : train_)
        if (i >= data_.objects.size()) throw DataError("training index out of range");
    if (data_.image_size != model_.config().out_size)
        throw DataError("dataset image size " + std::to_string(data_.image_size) + " does not match model out_size " +
                        std::to_string(model_.config().out_size));
    if (cfg_.freeze_encoder_layers > model_.config().encoder_layers)
        throw ConfigError("train.freeze_encoder_layers must be <= model.encoder_layers (" +
                          std::to_string(model_.config().encoder_layers) + ")");
    model_.set_freezing({cfg_.freeze_encoder_layers, cfg_.freeze_patch_embed});
    frozen0_ = frozen_checksum(model_.params());

    if (cfg_.eval_split == "train") eval_indices_ = train_;
    else if (cfg_.eval_split == "all") eval_indices_ = data_.all_indices();
    else eval_indices_ = data_.indices(parse_split(cfg_.eval_split));

    if (!out_.empty()) fs::create_directories(out_ / "checkpoints");
}

const Sample& Trainer::sample(std::size_t index) {
    auto it = cache_.find(index);
    if (it == cache_.end()) it = cache_.emplace(index, load_sample(data_, index)).first;
    return it->second;
}

RenderConfig Trainer::render_config() const {
    RenderConfig rc;
    rc.height = rc.width = static_cast<int>(model_.config().out_size);
    rc.upsample = static_cast<int>(cfg_.render_upsample);
    return rc;
}

std::int64_t Trainer::epochs_of(int phase) const { return phase == 1 ? cfg_.phase1_epochs : cfg_.phase2_epochs; }

std::int64_t Trainer::batches_per_epoch() const {
    return static_cast<std::int64_t>((train_.size() + static_cast<std::size_t>(cfg_.batch_size) - 1) /
                                     static_cast<std::size_t>(cfg_.batch_size));
}

double Trainer::lr_for(const Param& p, int phase, std::int64_t phase_step, std::int64_t total_steps) const {
    if (phase == 2) return cosine_lr(phase_step, total_steps, cfg_.phase2.max, cfg_.phase2.min);
    const auto& r = p.encoder_group ? cfg_.phase1_encoder : cfg_.phase1_rest;
    return cosine_lr(phase_step, total_steps, r.max, r.min);
}

std::vector<Pose> Trainer::novel_poses(int phase, std::int64_t phase_step) const {
    ViewConfig vc = data_.views;
    vc.seed = cfg_.seed;
    return NovelViewSampler(vc).sample_many(static_cast<std::uint64_t>(phase), static_cast<std::uint64_t>(phase_step),
                                            static_cast<int>(cfg_.novel_views));
}

void Trainer::append_log(const json& record) {
    if (out_.empty()) return;
    // A fresh run starts a new log; a resumed one continues the filtered log.
    std::ofstream f(out_ / "train_log.jsonl", log_open_ ? std::ios::app : std::ios::trunc);
    log_open_ = true;
    f << record.dump() << '\n';
}

StepRecord Trainer::train_step(int phase, std::int64_t epoch, const std::vector<std::size_t>& batch,
                               std::int64_t total_steps) {
    StepRecord r;
    r.phase = phase;
    r.epoch = epoch;
    auto& params = model_.params();
    for (auto& p : params) p.value.zero_grad();

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const auto rc = render_config();
    std::vector<Pose> poses;
    if (phase == 2) poses = novel_poses(2, step_in_phase_);

    for (auto idx : batch) {
        const Sample& s = sample(idx);
        reset_tape();
        const auto out = model_.generate(s.rgb, true);
        Objective o;
        if (phase == 1) {
            o = phase1_objective(out, s, cfg_.lambda_depth);
        } else {
            o = phase2_objective(out, novel_gt_views(s, data_.views, poses, rc, cfg_.mask_threshold), poses, data_.views, rc,
                                 cfg_.lambda_depth, cfg_.mask_threshold);
            if (o.points == 0) r.warnings.push_back(s.object_id + ": no predicted points");
            else if (o.dropped_views > 0)
                r.warnings.push_back(s.object_id + ": " + std::to_string(o.dropped_views) + " novel view(s) dropped every point");
        }
        if (!std::isfinite(o.value)) {
            std::ostringstream msg;
            msg << "non-finite loss at phase " << phase << " step " << step_in_phase_ << " (global " << global_step_
                << "), object " << s.object_id << ", last lr " << lr_for(params.front(), phase, step_in_phase_, total_steps);
            for (std::size_t v = 0; v < o.per_view.size(); ++v)
                if (!std::isfinite(o.per_view[v])) msg << ", offending view " << v;
            throw NumericError(msg.str());
        }
        r.loss += o.value * inv_b;
        r.mask_bce += o.mask_bce * inv_b;
        r.depth_l1 += o.depth_l1 * inv_b;
        if (o.total.requires_grad()) backward(scale(o.total, static_cast<float>(inv_b)));
    }
    reset_tape();

    r.grad_norm = clip_grad_norm(params, cfg_.clip_norm);
    if (!std::isfinite(r.grad_norm))
        throw NumericError("non-finite gradient norm at phase " + std::to_string(phase) + " step " +
                           std::to_string(step_in_phase_));
    Param enc, rest;
    enc.encoder_group = true;
    r.lr_encoder = lr_for(enc, phase, step_in_phase_, total_steps);
    r.lr_rest = lr_for(rest, phase, step_in_phase_, total_steps);
    adam_.step(params, [&](const Param& p) { return p.encoder_group ? r.lr_encoder : r.lr_rest; });

    r.phase_step = step_in_phase_;
    ++step_in_phase_;
    r.step = ++global_step_;
    return r;
}

double Trainer::objective_value(int phase, const std::vector<std::size_t>& batch, std::int64_t phase_step) {
    NoGradGuard ng;
    const auto rc = render_config();
    const auto poses = phase == 2 ? novel_poses(2, phase_step) : std::vector<Pose>{};
    double total = 0.0;
    for (auto idx : batch) {
        const Sample& s = sample(idx);
        const auto out = model_.generate(s.rgb, true);
        const auto o = phase == 1 ? phase1_objective(out, s, cfg_.lambda_depth)
                                  : phase2_objective(out, novel_gt_views(s, data_.views, poses, rc, cfg_.mask_threshold), poses,
                                                     data_.views, rc, cfg_.lambda_depth, cfg_.mask_threshold);
        total += o.value / static_cast<double>(batch.size());
    }
    return total;
}

void Trainer::save_checkpoint(double eval_score) {
    if (out_.empty()) return;
    auto entries = model_.state_entries();
    const auto opt = adam_.state_entries();
    entries.insert(entries.end(), opt.begin(), opt.end());
    json meta;
    meta["model"] = model_.config().to_json();
    meta["train"] = cfg_.to_json();
    meta["progress"] = {{"phase", phase_},
                        {"epochs_done", epochs_done_},
                        {"global_step", global_step_},
                        {"step_in_phase", step_in_phase_},
                        {"adam_steps", adam_.steps()},
                        {"frozen_checksum", hex64(frozen0_)}};
    const bool better = std::isfinite(eval_score) && (!has_best_ || eval_score < best_);
    if (better) {
        best_ = eval_score;
        has_best_ = true;
    }
    if (has_best_) meta["best_eval_pred_to_gt_x100"] = best_;

    char name[32];
    std::snprintf(name, sizeof name, "p%d-e%04lld", phase_, static_cast<long long>(epochs_done_));
    const auto dir = out_ / "checkpoints";
    write_checkpoint(dir / name, meta, entries);
    if (better) write_checkpoint(dir / "best", meta, entries);

    std::vector<fs::path> rolling;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && e.path().filename().string().rfind('p', 0) == 0) rolling.push_back(e.path());
    std::sort(rolling.begin(), rolling.end());
    while (static_cast<std::int64_t>(rolling.size()) > cfg_.keep_last) {
        fs::remove_all(rolling.front());
        rolling.erase(rolling.begin());
    }
}

std::optional<fs::path> Trainer::latest_checkpoint() const {
    if (out_.empty() || !fs::is_directory(out_ / "checkpoints")) return std::nullopt;
    std::vector<fs::path> rolling;
    for (const auto& e : fs::directory_iterator(out_ / "checkpoints"))
        if (e.is_directory() && e.path().filename().string().rfind('p', 0) == 0) rolling.push_back(e.path());
    if (rolling.empty()) return std::nullopt;
    std::sort(rolling.begin(), rolling.end());
    return rolling.back();
}

void Trainer::resume(const fs::path& checkpoint_dir) {
    const auto ck = read_checkpoint(checkpoint_dir);
    if (!ck.meta.contains("progress")) throw CheckpointError(checkpoint_dir.string() + " is not a training checkpoint");
    const auto& pr = ck.meta.at("progress");
    model_.load_state(ck);
    model_.set_freezing({cfg_.freeze_encoder_layers, cfg_.freeze_patch_embed});
    phase_ = pr.at("phase").get<int>();
    epochs_done_ = pr.at("epochs_done").get<std::int64_t>();
    global_step_ = pr.at("global_step").get<std::int64_t>();
    step_in_phase_ = pr.at("step_in_phase").get<std::int64_t>();
    adam_.load_state(ck, pr.at("adam_steps").get<std::int64_t>());
    frozen0_ = frozen_checksum(model_.params());
    if (pr.value("frozen_checksum", "") != hex64(frozen0_))
        throw CheckpointError("frozen parameters in " + checkpoint_dir.string() + " do not match the recorded checksum");
    has_best_ = ck.meta.contains("best_eval_pred_to_gt_x100");
    if (has_best_) best_ = ck.meta.at("best_eval_pred_to_gt_x100").get<double>();

    // Drop log records written after this checkpoint.
    if (!out_.empty()) {
        std::vector<std::string> keep;
        std::ifstream in(out_ / "train_log.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;
            if (j.value("step", std::int64_t{0}) <= global_step_) keep.push_back(line);
        }
        in.close();
        std::ofstream out(out_ / "train_log.jsonl", std::ios::trunc);
        for (const auto& l : keep) out << l << '\n';
        log_open_ = true;
    }
}

TrainLog Trainer::run_phase(int phase) {
    if (phase != 1 && phase != 2) throw std::invalid_argument("run_phase: phase must be 1 or 2");
    TrainLog log;
    if (phase < phase_) return log;
    if (phase > phase_) {
        phase_ = phase;
        epochs_done_ = 0;
        step_in_phase_ = 0;
        adam_.reset();
    }
    const auto epochs = epochs_of(phase);
    if (epochs_done_ >= epochs) return log;

    const auto t0 = std::chrono::steady_clock::now();
    const auto total_steps = std::max<std::int64_t>(1, epochs * batches_per_epoch());
    const std::string phase_name = "phase" + std::to_string(phase);
    std::vector<std::size_t> last_batch;
    std::int64_t last_step = 0;

    for (std::int64_t epoch = epochs_done_; epoch < epochs; ++epoch) {
        BatchIterator it(train_, static_cast<std::size_t>(cfg_.batch_size), cfg_.seed * 2 + static_cast<std::uint64_t>(phase),
                         static_cast<std::uint64_t>(epoch));
        while (it.has_next()) {
            last_batch = it.next();
            last_step = step_in_phase_;
            auto r = train_step(phase, epoch, last_batch, total_steps);
            append_log(r.to_json());
            if (echo_) {
                *echo_ << "phase " << phase << " epoch " << epoch << " step " << r.step << " loss " << r.loss
                       << " (bce " << r.mask_bce << ", depth " << r.depth_l1 << ") lr " << r.lr_rest;
                for (const auto& w : r.warnings) *echo_ << " [warning: " << w << "]";
                *echo_ << '\n';
            }
            log.steps.push_back(std::move(r));
        }
        epochs_done_ = epoch + 1;

        const auto checksum = frozen_checksum(model_.params());
        if (checksum != frozen0_)
            throw std::logic_error("frozen parameters changed during phase " + std::to_string(phase) + " epoch " +
                                   std::to_string(epoch));

        double score = std::numeric_limits<double>::quiet_NaN();
        const bool last = epochs_done_ == epochs;
        if (cfg_.eval_every > 0 && !eval_indices_.empty() && (epochs_done_ % cfg_.eval_every == 0 || last)) {
            const auto ev = evaluate(model_, data_, eval_indices_, cfg_.mask_threshold, "generator", phase_name);
            score = ev.row.pred_to_gt_x100;
            json e{{"event", "eval"},
                   {"phase", phase},
                   {"epoch", epoch},
                   {"step", global_step_},
                   {"split", cfg_.eval_split},
                   {"pred_to_gt_x100", ev.row.pred_to_gt_x100},
                   {"gt_to_pred_x100", ev.row.gt_to_pred_x100},
                   {"points", ev.row.points},
                   {"flagged", ev.flagged},
                   {"included", ev.included}};
            append_log(e);
            log.events.push_back(e);
            if (echo_)
                *echo_ << "eval phase " << phase << " epoch " << epoch << " pred->gt " << ev.row.pred_to_gt_x100
                       << " gt->pred " << ev.row.gt_to_pred_x100 << " points " << ev.row.points << '\n';
        }
        json ep{{"event", "epoch"}, {"phase", phase}, {"epoch", epoch}, {"step", global_step_},
                {"frozen_checksum", hex64(checksum)}};
        append_log(ep);
        log.events.push_back(ep);
        if ((cfg_.checkpoint_every > 0 && epochs_done_ % cfg_.checkpoint_every == 0) || last) save_checkpoint(score);
    }

    json end{{"event", "phase_end"}, {"phase", phase}, {"step", global_step_}, {"epochs", epochs}};
    end["final_batch"] = last_batch;
    end["final_phase_step"] = last_step;
    end["final_objective"] = objective_value(phase, last_batch, last_step);
    append_log(end);
    log.events.push_back(end);

    if (!out_.empty()) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json wt = json::object();
        if (std::ifstream in(out_ / "wall_time.json"); in) wt = json::parse(in, nullptr, false);
        if (!wt.is_object()) wt = json::object();
        wt[phase_name + "_seconds"] = wt.value(phase_name + "_seconds", 0.0) + secs;
        std::ofstream(out_ / "wall_time.json") << wt.dump(2) << '\n';
    }
    return log;
}

}  // namespace pcgen
