#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgen/checkpoint.hpp"
#include "pcgen/geometry.hpp"
#include "pcgen/ops.hpp"
#include "pcgen/tensor.hpp"

namespace pcgen {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class DecoderKind {
    transformer,  // autoregressive decoder + 1x1 conv / pixel-shuffle head
    conv,         // preliminary variant: deconv blocks + 3x3 conv to 16 channels
};

struct ModelConfig {
    std::int64_t image_in = 224;
    std::int64_t patch = 16;
    std::int64_t embed_dim = 768;
    std::int64_t encoder_layers = 12;
    std::int64_t decoder_layers = 4;
    std::int64_t heads = 12;
    std::int64_t mlp_ratio = 4;
    std::int64_t reduced_seq = 64;
    std::int64_t reduce_hidden = 256;  // hidden width of the sequence-reduction MLP
    std::int64_t head_channels = 512;
    std::int64_t views = kFixedViews;
    std::int64_t out_size = 128;
    float depth_offset = 3.0f;  // depth = softplus(raw) + offset
    bool class_token = true;
    DecoderKind decoder = DecoderKind::transformer;
    std::string scale_preset = "full";

    static ModelConfig full();
    static ModelConfig desk();
    static ModelConfig preset(const std::string& name);

    /// Throws ConfigError naming the offending field.
    void validate() const;

    std::int64_t patches() const { return (image_in / patch) * (image_in / patch); }
    std::int64_t tokens() const { return patches() + (class_token ? 1 : 0); }
    /// Side of the square memory / token grid.
    std::int64_t grid() const;
    /// Pixel-shuffle factor out_size / grid; also the patch size of the
    /// previous-view embedding.
    std::int64_t shuffle() const { return out_size / grid(); }

    nlohmann::json to_json() const;
    /// Starts from the preset named by "scale_preset" (default full) and
    /// overrides the given fields; unknown fields are a ConfigError.
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Views [8, 2, S, S]: channel 0 depth, channel 1 mask logits.
struct GeneratorOutput {
    Tensor views;

    Tensor depth() const;        // [8, S, S]
    Tensor mask_logits() const;  // [8, S, S]
    std::vector<float> mask_prob() const;
    std::vector<DepthMaskView> to_views() const;  // mask as probabilities
};

struct Param {
    std::string name;
    Tensor value;
    bool encoder_group = false;  // patch embedding + encoder layers
    int encoder_layer = -1;      // layer index for encoder-layer params
    bool frozen = false;
};

struct FreezePolicy {
    std::int64_t encoder_layers = 0;  // freeze layers [0, n)
    bool patch_embed = false;
};

/// Per-generate() decoder state: self-attention KV cache per layer and the
/// cross-attention keys/values of the memory.
struct DecoderState {
    std::int64_t step = 0;
    std::vector<Tensor> self_k, self_v;
    std::vector<Tensor> cross_k, cross_v;
};

/// The structure generator. Forward passes only read parameters (and the
/// batch-norm running statistics in eval mode), so concurrent eval-mode
/// forwards are safe.
class Generator {
public:
    explicit Generator(ModelConfig cfg, std::uint64_t seed = 0);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    Param& param(const std::string& name);

    Tensor patch_embed(const Tensor& image) const;
    Tensor encode(const Tensor& tokens) const;
    Tensor reduce_sequence(const Tensor& hidden) const;
    Tensor decoder_step(const Tensor& prev_view, const Tensor& memory, DecoderState& state) const;
    /// [reduced_seq, embed] -> [2, S, S] with the depth activation applied.
    /// `trace` (optional) receives the shape after reshape, conv and shuffle.
    Tensor decoder_head(const Tensor& tokens, std::vector<Shape>* trace = nullptr) const;
    /// Preliminary variant: memory -> [8, 2, S, S].
    Tensor conv_decoder(const Tensor& memory, bool training);

    /// image [3, H, W] with H == W; resized to image_in if needed.
    GeneratorOutput generate(const Tensor& image, bool training = false);

    void set_freezing(const FreezePolicy& policy);
    std::int64_t count_params(bool trainable_only) const;
    /// Sets the reduction MLP to the identity map (requires tokens() ==
    /// reduced_seq).
    void reset_reduce_to_identity();

    /// Parameters followed by batch-norm running statistics.
    std::vector<CheckpointEntry> state_entries() const;
    /// Copies values (and frozen flags) from a checkpoint; every parameter
    /// must be present with a matching shape.
    void load_state(const LoadedCheckpoint& ck);
    void save(const std::filesystem::path& dir) const;
    static Generator load(const std::filesystem::path& dir);

private:
    struct Linear {
        Tensor w, b;  // w [in, out]
    };
    struct Norm {
        Tensor g, b;
    };
    struct Attention {
        Linear q, k, v, o;
    };
    struct EncoderLayer {
        Norm ln1, ln2;
        Attention attn;
        Linear fc1, fc2;
    };
    struct DecoderLayer {
        Norm ln1, ln2, ln3;
        Attention self_attn, cross_attn;
        Linear fc1, fc2;
    };
    struct DeconvBlock {
        Tensor w, b, gamma, beta;
    };

    // Registration helpers; `enc_layer` is -2 for non-encoder params, -1 for
    // the patch embedding and >= 0 for encoder layers.
    Tensor add_param(const std::string& name, Shape shape, int enc_layer);
    Linear add_linear(std::mt19937_64& rng, const std::string& name, std::int64_t in, std::int64_t out, int enc_layer);
    Norm add_norm(const std::string& name, std::int64_t dim, int enc_layer);
    Attention add_attention(std::mt19937_64& rng, const std::string& name, int enc_layer);

    Tensor mlp(const Linear& fc1, const Linear& fc2, const Tensor& x) const;

    ModelConfig cfg_;
    std::vector<Param> params_;

    Linear patch_proj_;
    Tensor cls_, pos_;
    std::vector<EncoderLayer> enc_;
    Tensor reduce_skip_;  // [L, reduced_seq]
    Linear reduce_fc1_, reduce_fc2_;

    Linear view_embed_;
    Tensor dec_pos_, step_embed_;
    std::vector<DecoderLayer> dec_;
    Norm dec_norm_;
    Tensor head_w_, head_b_;  // 1x1 conv [head_channels, embed, 1, 1]

    std::vector<DeconvBlock> deconv_;
    std::vector<BatchNormState> bn_;
    Tensor final_w_, final_b_;  // 3x3 conv to 16 channels
};

/// Bilinear resize of [C, H, W] to [C, size, size] (half-pixel centers).
/// Not differentiable; used for input images only.
Tensor resize_image(const Tensor& image, std::int64_t size);

}  // namespace pcgen
