#include "pcgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pcgen {

namespace {

bool is_perfect_square(std::int64_t n, std::int64_t& root) {
    root = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return root * root == n;
}

bool is_pow2(std::int64_t n) { return n >= 1 && (n & (n - 1)) == 0; }

[[noreturn]] void bad(const std::string& field, const std::string& why) {
    throw ConfigError("model config: " + field + " " + why);
}

const char* decoder_name(DecoderKind k) { return k == DecoderKind::conv ? "conv" : "transformer"; }

void fill_uniform(Tensor& t, std::mt19937_64& rng, float bound) {
    std::uniform_real_distribution<float> u(-bound, bound);
    for (auto& v : t.mutable_data()) v = u(rng);
}

void fill_xavier(Tensor& t, std::mt19937_64& rng, std::int64_t fan_in, std::int64_t fan_out) {
    fill_uniform(t, rng, static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out))));
}

// Linear resampling matrix [from, to] with half-pixel alignment; identity
// when from == to.
void fill_resample(Tensor& t, std::int64_t from, std::int64_t to) {
    auto d = t.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
    for (std::int64_t j = 0; j < to; ++j) {
        double s = (j + 0.5) * static_cast<double>(from) / static_cast<double>(to) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(from - 1));
        const auto i0 = static_cast<std::int64_t>(std::floor(s));
        const auto i1 = std::min(i0 + 1, from - 1);
        const double w1 = s - static_cast<double>(i0);
        d[static_cast<std::size_t>(i0 * to + j)] += static_cast<float>(1.0 - w1);
        if (w1 > 0.0) d[static_cast<std::size_t>(i1 * to + j)] += static_cast<float>(w1);
    }
}

}  // namespace

// --- config -------------------------------------------------------------------

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.image_in = 64;
    c.patch = 8;
    c.embed_dim = 32;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 2;
    c.reduced_seq = 16;
    c.reduce_hidden = 32;
    c.head_channels = 128;
    c.out_size = 32;
    c.scale_preset = "desk";
    return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "desk") return desk();
    bad("scale_preset", "must be 'full' or 'desk', got '" + name + "'");
}

std::int64_t ModelConfig::grid() const {
    std::int64_t g = 0;
    is_perfect_square(reduced_seq, g);
    return g;
}

void ModelConfig::validate() const {
    if (image_in < 1) bad("image_in", "must be >= 1");
    if (patch < 1) bad("patch", "must be >= 1");
    if (image_in % patch != 0) bad("image_in", "(" + std::to_string(image_in) + ") must be divisible by patch (" + std::to_string(patch) + ")");
    if (embed_dim < 1) bad("embed_dim", "must be >= 1");
    if (heads < 1 || embed_dim % heads != 0) bad("heads", "must be >= 1 and divide embed_dim (" + std::to_string(embed_dim) + ")");
    if (encoder_layers < 0) bad("encoder_layers", "must be >= 0");
    if (decoder_layers < 0) bad("decoder_layers", "must be >= 0");
    if (mlp_ratio < 1) bad("mlp_ratio", "must be >= 1");
    if (reduce_hidden < 1) bad("reduce_hidden", "must be >= 1");
    std::int64_t g = 0;
    if (reduced_seq < 1 || !is_perfect_square(reduced_seq, g)) bad("reduced_seq", "must be a perfect square, got " + std::to_string(reduced_seq));
    if (views != kFixedViews) bad("views", "must be " + std::to_string(kFixedViews));
    if (out_size < 1 || out_size % g != 0) bad("out_size", "must be a positive multiple of sqrt(reduced_seq) = " + std::to_string(g));
    const auto r = out_size / g;
    if (decoder == DecoderKind::transformer) {
        if (head_channels % (r * r) != 0 || head_channels / (r * r) < 2)
            bad("head_channels", "must be divisible by (out_size/sqrt(reduced_seq))^2 = " + std::to_string(r * r) +
                                     " with quotient >= 2, got " + std::to_string(head_channels));
    } else if (!is_pow2(r)) {
        bad("out_size", "over sqrt(reduced_seq) must be a power of two for the conv decoder");
    }
    if (!std::isfinite(depth_offset) || depth_offset < 0.0f) bad("depth_offset", "must be finite and >= 0");
    if (scale_preset != "full" && scale_preset != "desk") bad("scale_preset", "must be 'full' or 'desk'");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"scale_preset", scale_preset}, {"image_in", image_in},       {"patch", patch},
            {"embed_dim", embed_dim},       {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
            {"heads", heads},               {"mlp_ratio", mlp_ratio},     {"reduced_seq", reduced_seq},
            {"reduce_hidden", reduce_hidden}, {"head_channels", head_channels}, {"views", views},
            {"out_size", out_size},         {"depth_offset", depth_offset}, {"class_token", class_token},
            {"decoder", decoder_name(decoder)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
    ModelConfig c = preset(j.value("scale_preset", std::string("full")));
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "scale_preset") continue;
            if (key == "image_in") c.image_in = v.get<std::int64_t>();
            else if (key == "patch") c.patch = v.get<std::int64_t>();
            else if (key == "embed_dim") c.embed_dim = v.get<std::int64_t>();
            else if (key == "encoder_layers") c.encoder_layers = v.get<std::int64_t>();
            else if (key == "decoder_layers") c.decoder_layers = v.get<std::int64_t>();
            else if (key == "heads") c.heads = v.get<std::int64_t>();
            else if (key == "mlp_ratio") c.mlp_ratio = v.get<std::int64_t>();
            else if (key == "reduced_seq") c.reduced_seq = v.get<std::int64_t>();
            else if (key == "reduce_hidden") c.reduce_hidden = v.get<std::int64_t>();
            else if (key == "head_channels") c.head_channels = v.get<std::int64_t>();
            else if (key == "views") c.views = v.get<std::int64_t>();
            else if (key == "out_size") c.out_size = v.get<std::int64_t>();
            else if (key == "depth_offset") c.depth_offset = v.get<float>();
            else if (key == "class_token") c.class_token = v.get<bool>();
            else if (key == "decoder") {
                const auto s = v.get<std::string>();
                if (s == "transformer") c.decoder = DecoderKind::transformer;
                else if (s == "conv") c.decoder = DecoderKind::conv;
                else bad("decoder", "must be 'transformer' or 'conv', got '" + s + "'");
            } else {
                throw ConfigError("model config: unknown field '" + key + "'");
            }
        } catch (const nlohmann::json::exception&) {
            bad(key, "has the wrong type");
        }
    }
    c.validate();
    return c;
}

// --- output --------------------------------------------------------------------

Tensor GeneratorOutput::depth() const {
    return reshape(slice(views, 1, 0, 1), {views.dim(0), views.dim(2), views.dim(3)});
}

Tensor GeneratorOutput::mask_logits() const {
    return reshape(slice(views, 1, 1, 1), {views.dim(0), views.dim(2), views.dim(3)});
}

std::vector<float> GeneratorOutput::mask_prob() const {
    NoGradGuard ng;
    const auto l = mask_logits();
    std::vector<float> p(l.numel());
    auto d = l.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(d[i]))));
    return p;
}

std::vector<DepthMaskView> GeneratorOutput::to_views() const {
    const auto V = views.dim(0), H = views.dim(2), W = views.dim(3);
    const auto plane = static_cast<std::size_t>(H * W);
    const auto prob = mask_prob();
    auto d = views.data();
    std::vector<DepthMaskView> out(static_cast<std::size_t>(V));
    for (std::int64_t v = 0; v < V; ++v) {
        auto& o = out[static_cast<std::size_t>(v)];
        o.height = static_cast<int>(H);
        o.width = static_cast<int>(W);
        const auto base = static_cast<std::size_t>(v) * 2 * plane;
        o.depth.assign(d.begin() + static_cast<std::ptrdiff_t>(base), d.begin() + static_cast<std::ptrdiff_t>(base + plane));
        o.mask.assign(prob.begin() + static_cast<std::ptrdiff_t>(v * H * W), prob.begin() + static_cast<std::ptrdiff_t>((v + 1) * H * W));
        o.mask_is_probability = true;
    }
    return out;
}

// --- construction ----------------------------------------------------------------

Tensor Generator::add_param(const std::string& name, Shape shape, int enc_layer) {
    Param p;
    p.name = name;
    p.value = Tensor::zeros(std::move(shape), true);
    p.encoder_group = enc_layer >= -1;
    p.encoder_layer = std::max(enc_layer, -1);
    params_.push_back(p);
    return p.value;
}

Generator::Linear Generator::add_linear(std::mt19937_64& rng, const std::string& name, std::int64_t in, std::int64_t out,
                                        int enc_layer) {
    Linear l{add_param(name + ".w", {in, out}, enc_layer), add_param(name + ".b", {out}, enc_layer)};
    fill_xavier(l.w, rng, in, out);
    return l;
}

Generator::Norm Generator::add_norm(const std::string& name, std::int64_t dim, int enc_layer) {
    Norm n{add_param(name + ".g", {dim}, enc_layer), add_param(name + ".b", {dim}, enc_layer)};
    std::fill(n.g.mutable_data().begin(), n.g.mutable_data().end(), 1.0f);
    return n;
}

Generator::Attention Generator::add_attention(std::mt19937_64& rng, const std::string& name, int enc_layer) {
    const auto E = cfg_.embed_dim;
    Attention a;
    a.q = add_linear(rng, name + ".q", E, E, enc_layer);
    a.k = add_linear(rng, name + ".k", E, E, enc_layer);
    a.v = add_linear(rng, name + ".v", E, E, enc_layer);
    a.o = add_linear(rng, name + ".o", E, E, enc_layer);
    return a;
}

Generator::Generator(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto E = cfg_.embed_dim, P = cfg_.patch, L = cfg_.tokens(), rs = cfg_.reduced_seq;
    const auto hidden = cfg_.mlp_ratio * E;
    constexpr int kNone = -2;

    patch_proj_ = add_linear(rng, "patch.proj", 3 * P * P, E, -1);
    if (cfg_.class_token) {
        // Patch-token scale: a near-constant cls row would sit in the
        // ill-conditioned corner of the first layer norm.
        cls_ = add_param("patch.cls", {1, E}, -1);
        fill_uniform(cls_, rng, 1.0f);
    }
    pos_ = add_param("patch.pos", {L, E}, -1);
    fill_uniform(pos_, rng, 0.02f);

    for (int i = 0; i < cfg_.encoder_layers; ++i) {
        const std::string n = "encoder." + std::to_string(i);
        EncoderLayer l;
        l.ln1 = add_norm(n + ".ln1", E, i);
        l.attn = add_attention(rng, n + ".attn", i);
        l.ln2 = add_norm(n + ".ln2", E, i);
        l.fc1 = add_linear(rng, n + ".fc1", E, hidden, i);
        l.fc2 = add_linear(rng, n + ".fc2", hidden, E, i);
        enc_.push_back(l);
    }

    reduce_skip_ = add_param("reduce.skip", {L, rs}, kNone);
    fill_resample(reduce_skip_, L, rs);
    reduce_fc1_ = add_linear(rng, "reduce.fc1", L, cfg_.reduce_hidden, kNone);
    reduce_fc2_ = add_linear(rng, "reduce.fc2", cfg_.reduce_hidden, rs, kNone);

    const auto r = cfg_.shuffle();
    if (cfg_.decoder == DecoderKind::transformer) {
        view_embed_ = add_linear(rng, "decoder.view_embed", 2 * r * r, E, kNone);
        dec_pos_ = add_param("decoder.pos", {rs, E}, kNone);
        step_embed_ = add_param("decoder.step", {cfg_.views, E}, kNone);
        fill_uniform(dec_pos_, rng, 0.02f);
        fill_uniform(step_embed_, rng, 0.02f);
        for (int i = 0; i < cfg_.decoder_layers; ++i) {
            const std::string n = "decoder." + std::to_string(i);
            DecoderLayer l;
            l.ln1 = add_norm(n + ".ln1", E, kNone);
            l.self_attn = add_attention(rng, n + ".self_attn", kNone);
            l.ln2 = add_norm(n + ".ln2", E, kNone);
            l.cross_attn = add_attention(rng, n + ".cross_attn", kNone);
            l.ln3 = add_norm(n + ".ln3", E, kNone);
            l.fc1 = add_linear(rng, n + ".fc1", E, hidden, kNone);
            l.fc2 = add_linear(rng, n + ".fc2", hidden, E, kNone);
            dec_.push_back(l);
        }
        dec_norm_ = add_norm("decoder.norm", E, kNone);
        head_w_ = add_param("head.w", {cfg_.head_channels, E, 1, 1}, kNone);
        head_b_ = add_param("head.b", {cfg_.head_channels}, kNone);
        fill_xavier(head_w_, rng, E, cfg_.head_channels);
    } else {
        // One stride-2 deconv block per doubling, halving channels (min 8).
        std::int64_t c = E;
        for (int i = 0; (std::int64_t{1} << i) < r; ++i) {
            const std::string n = "conv_decoder.block" + std::to_string(i);
            const auto c2 = std::max<std::int64_t>(8, c / 2);
            DeconvBlock b;
            b.w = add_param(n + ".w", {c, c2, 4, 4}, kNone);
            b.b = add_param(n + ".b", {c2}, kNone);
            b.gamma = add_param(n + ".bn.g", {c2}, kNone);
            b.beta = add_param(n + ".bn.b", {c2}, kNone);
            fill_xavier(b.w, rng, c * 16, c2 * 16);
            std::fill(b.gamma.mutable_data().begin(), b.gamma.mutable_data().end(), 1.0f);
            deconv_.push_back(b);
            bn_.push_back(BatchNormState{});
            c = c2;
        }
        const auto out_ch = 2 * cfg_.views;
        final_w_ = add_param("conv_decoder.final.w", {out_ch, c, 3, 3}, kNone);
        final_b_ = add_param("conv_decoder.final.b", {out_ch}, kNone);
        fill_xavier(final_w_, rng, c * 9, out_ch * 9);
    }
}

Param& Generator::param(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw std::out_of_range("no parameter named '" + name + "'");
}

// --- forward ----------------------------------------------------------------------

namespace {

Tensor linear_fwd(const Tensor& w, const Tensor& b, const Tensor& x) { return add_bias(matmul(x, w), b); }

}  // namespace

Tensor Generator::mlp(const Linear& fc1, const Linear& fc2, const Tensor& x) const {
    return linear_fwd(fc2.w, fc2.b, gelu(linear_fwd(fc1.w, fc1.b, x)));
}

Tensor Generator::patch_embed(const Tensor& image) const {
    const auto S = cfg_.image_in, P = cfg_.patch;
    if (image.shape() != Shape{3, S, S})
        throw ShapeError("patch_embed: expected image [3," + std::to_string(S) + "," + std::to_string(S) + "], got " +
                         shape_str(image.shape()));
    const auto n = cfg_.patches();
    // [3P^2, S/P, S/P] -> one row of 3P^2 values per patch.
    Tensor patches = transpose(reshape(pixel_unshuffle(image, P), {3 * P * P, n}));
    Tensor tok = linear_fwd(patch_proj_.w, patch_proj_.b, patches);
    if (cfg_.class_token) tok = concat({cls_, tok}, 0);
    return add_rows(tok, pos_);
}

Tensor Generator::encode(const Tensor& tokens) const {
    if (tokens.shape() != Shape{cfg_.tokens(), cfg_.embed_dim})
        throw ShapeError("encode: expected tokens [" + std::to_string(cfg_.tokens()) + "," + std::to_string(cfg_.embed_dim) +
                         "], got " + shape_str(tokens.shape()));
    const int H = static_cast<int>(cfg_.heads);
    Tensor x = tokens;
    for (const auto& l : enc_) {
        Tensor h = layer_norm(x, l.ln1.g, l.ln1.b);
        Tensor a = scaled_dot_product_attention(linear_fwd(l.attn.q.w, l.attn.q.b, h), linear_fwd(l.attn.k.w, l.attn.k.b, h),
                                                linear_fwd(l.attn.v.w, l.attn.v.b, h), H, false);
        x = add(x, linear_fwd(l.attn.o.w, l.attn.o.b, a));
        x = add(x, mlp(l.fc1, l.fc2, layer_norm(x, l.ln2.g, l.ln2.b)));
    }
    return x;
}

Tensor Generator::reduce_sequence(const Tensor& hidden) const {
    if (hidden.shape() != Shape{cfg_.tokens(), cfg_.embed_dim})
        throw ShapeError("reduce_sequence: expected [" + std::to_string(cfg_.tokens()) + "," +
                         std::to_string(cfg_.embed_dim) + "], got " + shape_str(hidden.shape()));
    // MLP over the sequence axis, one row per embedding channel.
    Tensor xt = transpose(hidden);
    Tensor y = add(matmul(xt, reduce_skip_), mlp(reduce_fc1_, reduce_fc2_, xt));
    return transpose(y);
}

void Generator::reset_reduce_to_identity() {
    if (cfg_.tokens() != cfg_.reduced_seq) throw std::logic_error("identity reduction needs tokens == reduced_seq");
    fill_resample(reduce_skip_, cfg_.tokens(), cfg_.reduced_seq);
    for (Tensor* t : {&reduce_fc2_.w, &reduce_fc2_.b}) std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0f);
}

Tensor Generator::decoder_step(const Tensor& prev_view, const Tensor& memory, DecoderState& state) const {
    if (cfg_.decoder != DecoderKind::transformer) throw std::logic_error("decoder_step on a conv-decoder model");
    const auto S = cfg_.out_size, E = cfg_.embed_dim, rs = cfg_.reduced_seq, r = cfg_.shuffle();
    if (prev_view.shape() != Shape{2, S, S})
        throw ShapeError("decoder_step: expected previous view [2," + std::to_string(S) + "," + std::to_string(S) +
                         "], got " + shape_str(prev_view.shape()));
    if (memory.shape() != Shape{rs, E}) throw ShapeError("decoder_step: memory shape " + shape_str(memory.shape()));
    const auto nl = dec_.size();
    if (state.step >= cfg_.views) throw std::logic_error("decoder_step: all views already generated");
    if (state.step == 0) {
        state.self_k.assign(nl, Tensor());
        state.self_v.assign(nl, Tensor());
        state.cross_k.clear();
        state.cross_v.clear();
        for (const auto& l : dec_) {
            state.cross_k.push_back(linear_fwd(l.cross_attn.k.w, l.cross_attn.k.b, memory));
            state.cross_v.push_back(linear_fwd(l.cross_attn.v.w, l.cross_attn.v.b, memory));
        }
    } else if (state.self_k.size() != nl || state.cross_k.size() != nl) {
        throw std::logic_error("decoder_step: state does not belong to this model");
    }
    const int H = static_cast<int>(cfg_.heads);

    Tensor patches = transpose(reshape(pixel_unshuffle(prev_view, r), {2 * r * r, rs}));
    Tensor x = add_rows(linear_fwd(view_embed_.w, view_embed_.b, patches), dec_pos_);
    x = add_bias(x, reshape(slice(step_embed_, 0, state.step, 1), {E}));

    for (std::size_t i = 0; i < nl; ++i) {
        const auto& l = dec_[i];
        Tensor h = layer_norm(x, l.ln1.g, l.ln1.b);
        Tensor k = linear_fwd(l.self_attn.k.w, l.self_attn.k.b, h);
        Tensor v = linear_fwd(l.self_attn.v.w, l.self_attn.v.b, h);
        // Queries of this step see every earlier step plus the current one.
        if (state.step > 0) {
            k = concat({state.self_k[i], k}, 0);
            v = concat({state.self_v[i], v}, 0);
        }
        state.self_k[i] = k;
        state.self_v[i] = v;
        Tensor a = scaled_dot_product_attention(linear_fwd(l.self_attn.q.w, l.self_attn.q.b, h), k, v, H, false);
        x = add(x, linear_fwd(l.self_attn.o.w, l.self_attn.o.b, a));

        h = layer_norm(x, l.ln2.g, l.ln2.b);
        a = scaled_dot_product_attention(linear_fwd(l.cross_attn.q.w, l.cross_attn.q.b, h), state.cross_k[i],
                                         state.cross_v[i], H, false);
        x = add(x, linear_fwd(l.cross_attn.o.w, l.cross_attn.o.b, a));
        x = add(x, mlp(l.fc1, l.fc2, layer_norm(x, l.ln3.g, l.ln3.b)));
    }
    ++state.step;
    return layer_norm(x, dec_norm_.g, dec_norm_.b);
}

namespace {

// [*, C>=2, S, S] -> channel 0 through softplus + offset, channel 1 as is.
Tensor activate(const Tensor& raw, int axis, float offset) {
    Tensor depth = add_scalar(softplus(slice(raw, axis, 0, 1)), offset);
    return concat({depth, slice(raw, axis, 1, 1)}, axis);
}

}  // namespace

Tensor Generator::decoder_head(const Tensor& tokens, std::vector<Shape>* trace) const {
    if (cfg_.decoder != DecoderKind::transformer) throw std::logic_error("decoder_head on a conv-decoder model");
    const auto E = cfg_.embed_dim, g = cfg_.grid(), S = cfg_.out_size;
    if (tokens.shape() != Shape{cfg_.reduced_seq, E})
        throw ShapeError("decoder_head: expected tokens [" + std::to_string(cfg_.reduced_seq) + "," + std::to_string(E) +
                         "], got " + shape_str(tokens.shape()));
    Tensor x = reshape(transpose(tokens), {1, E, g, g});
    Tensor y = conv2d(x, head_w_, head_b_, 1, 0);
    Tensor z = pixel_shuffle(y, cfg_.shuffle());
    if (trace) {
        for (const Tensor* t : {&x, &y, &z}) trace->push_back(Shape(t->shape().begin() + 1, t->shape().end()));
    }
    return reshape(activate(slice(z, 1, 0, 2), 1, cfg_.depth_offset), {2, S, S});
}

Tensor Generator::conv_decoder(const Tensor& memory, bool training) {
    if (cfg_.decoder != DecoderKind::conv) throw std::logic_error("conv_decoder on a transformer-decoder model");
    const auto E = cfg_.embed_dim, g = cfg_.grid(), S = cfg_.out_size, V = cfg_.views;
    Tensor x = reshape(transpose(memory), {1, E, g, g});
    for (std::size_t i = 0; i < deconv_.size(); ++i) {
        const auto& b = deconv_[i];
        x = relu(batch_norm(conv_transpose2d(x, b.w, b.b, 2, 1), b.gamma, b.beta, bn_[i], training));
    }
    x = conv2d(x, final_w_, final_b_, 1, 1);  // [1, 2V, S, S]: V depth then V mask channels
    x = permute(reshape(x, {2, V, S, S}), {1, 0, 2, 3});
    return activate(x, 1, cfg_.depth_offset);
}

GeneratorOutput Generator::generate(const Tensor& image, bool training) {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
        throw ShapeError("generate: expected a square RGB image [3,S,S], got " + shape_str(image.shape()));
    const Tensor img = image.dim(1) == cfg_.image_in ? image : resize_image(image, cfg_.image_in);
    Tensor memory = reduce_sequence(encode(patch_embed(img)));

    GeneratorOutput out;
    if (cfg_.decoder == DecoderKind::conv) {
        out.views = conv_decoder(memory, training);
        return out;
    }
    const auto S = cfg_.out_size;
    DecoderState state;
    Tensor prev = Tensor::ones({2, S, S});
    std::vector<Tensor> views;
    for (std::int64_t t = 0; t < cfg_.views; ++t) {
        const Tensor v = decoder_head(decoder_step(prev, memory, state));
        views.push_back(reshape(v, {1, 2, S, S}));
        // Fed back centred: raw depth carries a constant offset that would
        // swamp the view embedding and make every step look alike.
        prev = concat({add_scalar(slice(v, 0, 0, 1), -cfg_.depth_offset), sigmoid(slice(v, 0, 1, 1))}, 0);
    }
    out.views = concat(views, 0);
    return out;
}

// --- freezing / counting ------------------------------------------------------------

void Generator::set_freezing(const FreezePolicy& policy) {
    if (policy.encoder_layers < 0 || policy.encoder_layers > cfg_.encoder_layers)
        throw std::out_of_range("set_freezing: encoder layer count " + std::to_string(policy.encoder_layers) +
                                " outside [0, " + std::to_string(cfg_.encoder_layers) + "]");
    for (auto& p : params_) {
        const bool in_layer = p.encoder_layer >= 0 && p.encoder_layer < policy.encoder_layers;
        const bool in_embed = policy.patch_embed && p.encoder_group && p.encoder_layer < 0;
        p.frozen = in_layer || in_embed;
        p.value.set_requires_grad(!p.frozen);
    }
}

std::int64_t Generator::count_params(bool trainable_only) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        if (!trainable_only || !p.frozen) n += static_cast<std::int64_t>(p.value.numel());
    return n;
}

// --- checkpoints ----------------------------------------------------------------------

std::vector<CheckpointEntry> Generator::state_entries() const {
    std::vector<CheckpointEntry> out;
    for (const auto& p : params_) out.push_back({p.name, p.value, p.frozen});
    for (std::size_t i = 0; i < bn_.size(); ++i) {
        const std::string n = "conv_decoder.block" + std::to_string(i) + ".bn.";
        const auto C = deconv_[i].gamma.numel();
        auto stat = [C](const std::vector<float>& v, float fill) {
            return Tensor::from_data({static_cast<std::int64_t>(C)}, v.empty() ? std::vector<float>(C, fill) : v);
        };
        out.push_back({n + "running_mean", stat(bn_[i].running_mean, 0.0f), false});
        out.push_back({n + "running_var", stat(bn_[i].running_var, 1.0f), false});
    }
    return out;
}

void Generator::load_state(const LoadedCheckpoint& ck) {
    for (auto& p : params_) {
        const auto* e = ck.find(p.name);
        if (!e) throw CheckpointError("checkpoint: missing parameter '" + p.name + "'");
        if (e->tensor.shape() != p.value.shape())
            throw CheckpointError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(e->tensor.shape()) +
                                  ", model expects " + shape_str(p.value.shape()));
        auto src = e->tensor.data();
        std::copy(src.begin(), src.end(), p.value.mutable_data().begin());
        p.frozen = e->frozen;
        p.value.set_requires_grad(!p.frozen);
    }
    for (std::size_t i = 0; i < bn_.size(); ++i) {
        const std::string n = "conv_decoder.block" + std::to_string(i) + ".bn.";
        bn_[i].running_mean = ck.at(n + "running_mean").vec();
        bn_[i].running_var = ck.at(n + "running_var").vec();
    }
}

void Generator::save(const std::filesystem::path& dir) const {
    write_checkpoint(dir, {{"model", cfg_.to_json()}}, state_entries());
}

Generator Generator::load(const std::filesystem::path& dir) {
    const auto ck = read_checkpoint(dir);
    if (!ck.meta.contains("model")) throw CheckpointError("checkpoint: manifest meta has no model config");
    Generator g(ModelConfig::from_json(ck.meta.at("model")));
    g.load_state(ck);
    return g;
}

// --- input resize ------------------------------------------------------------------------

Tensor resize_image(const Tensor& image, std::int64_t size) {
    if (image.ndim() != 3 || size < 1) throw ShapeError("resize_image: expected [C,H,W] and size >= 1");
    const auto C = image.dim(0), H = image.dim(1), W = image.dim(2);
    std::vector<float> out(static_cast<std::size_t>(C * size * size));
    auto src = image.data();
    auto coord = [](std::int64_t dst, std::int64_t from, std::int64_t to, std::int64_t& i0, std::int64_t& i1, double& w) {
        double s = (dst + 0.5) * static_cast<double>(from) / static_cast<double>(to) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(from - 1));
        i0 = static_cast<std::int64_t>(std::floor(s));
        i1 = std::min(i0 + 1, from - 1);
        w = s - static_cast<double>(i0);
    };
    for (std::int64_t y = 0; y < size; ++y) {
        std::int64_t y0, y1;
        double wy;
        coord(y, H, size, y0, y1, wy);
        for (std::int64_t x = 0; x < size; ++x) {
            std::int64_t x0, x1;
            double wx;
            coord(x, W, size, x0, x1, wx);
            for (std::int64_t c = 0; c < C; ++c) {
                auto at = [&](std::int64_t yy, std::int64_t xx) { return static_cast<double>(src[static_cast<std::size_t>((c * H + yy) * W + xx)]); };
                const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
                const double bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
                out[static_cast<std::size_t>((c * size + y) * size + x)] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return Tensor::from_data({C, size, size}, std::move(out));
}

}  // namespace pcgen
