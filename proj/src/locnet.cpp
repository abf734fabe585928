#include "abdkit/locnet.hpp"

#include <chrono>
#include <cmath>

#include "abdkit/error.hpp"
#include "abdkit/tensor_io.hpp"

namespace abdkit {

using ad::Shape;
using ad::Tensor;

namespace {

int stem_kernel(int stride) { return stride > 1 ? 2 * stride - 1 : 3; }

std::string stage_name(int stage, int block, const char* part) {
    return "layer" + std::to_string(stage) + "." + std::to_string(block) + "." + part;
}

// Extent after the stem and the four stages along one axis.
std::array<int, 5> backbone_extents(int n, const LocNetConfig& c, int axis) {
    std::array<int, 5> out{};
    const int s0 = c.stride_plan[0][static_cast<std::size_t>(axis)];
    const int k0 = stem_kernel(s0);
    n = ad::conv_out_extent(n, k0, s0, (k0 - 1) / 2);
    out[0] = n;
    for (std::size_t i = 1; i < 5; ++i) {
        n = ad::conv_out_extent(n, 3, c.stride_plan[i][static_cast<std::size_t>(axis)], 1);
        out[i] = n;
    }
    return out;
}

std::array<int, 4> view_extents(int n) {
    std::array<int, 4> out{};
    for (auto& e : out) e = n = ad::conv_out_extent(n, 3, 2, 1);
    return out;
}

Tensor targets(const std::vector<LocSample>& data, const LocNetConfig& c, bool start) {
    const int L = c.heatmap_len;
    std::vector<double> t;
    t.reserve(data.size() * static_cast<std::size_t>(L));
    for (const auto& s : data) {
        const int idx = start ? s.label.start_idx : s.label.end_idx;
        const auto h = c.target == TargetKind::gaussian ? encode_gaussian(idx, L, c.sigma) : encode_onehot(idx, L);
        t.insert(t.end(), h.probs.begin(), h.probs.end());
    }
    return Tensor({static_cast<int>(data.size()), L}, std::move(t));
}

LocBatch batch_of(const std::vector<LocSample>& data) {
    std::vector<const Volume*> vols;
    for (const auto& s : data) vols.push_back(s.normalized);
    return make_batch(vols);
}

Tensor batch_loss(const LocOutput& out, const Tensor& ts, const Tensor& te, int n) {
    return ad::scale(ad::add(ad::kl_div(ts, out.start), ad::kl_div(te, out.end)), 1.0 / n);
}

}  // namespace

std::string to_string(ViewMode m) { return m == ViewMode::multi_view ? "multi_view" : "volume_only"; }

ViewMode view_mode_from_string(const std::string& s) {
    if (s == "multi_view") return ViewMode::multi_view;
    if (s == "volume_only") return ViewMode::volume_only;
    throw ConfigError("unknown view mode '" + s + "'");
}

std::string to_string(TargetKind k) { return k == TargetKind::gaussian ? "gaussian" : "onehot"; }

TargetKind target_kind_from_string(const std::string& s) {
    if (s == "gaussian") return TargetKind::gaussian;
    if (s == "onehot") return TargetKind::onehot;
    throw ConfigError("unknown target kind '" + s + "'");
}

void validate(const LocNetConfig& c) {
    const Dims& d = c.input_dims;
    if (d.d < 16 || d.h < 1 || d.w < 1) throw ConfigError("input dims must have D >= 16 and positive H, W");
    if (d.d % 16 != 0) throw ConfigError("input D must be a multiple of 16");
    int prod = 1;
    for (const auto& s : c.stride_plan) {
        for (int v : s) {
            if (v < 1) throw ConfigError("strides must be >= 1");
        }
        prod *= s[0];
    }
    if (prod != 16) {
        throw ConfigError("stride plan reduces the slice axis by " + std::to_string(prod) + ", expected 16");
    }
    for (int ch : c.channels_3d) {
        if (ch < 1) throw ConfigError("channels_3d entries must be positive");
    }
    for (int ch : c.view_channels) {
        if (ch < 1) throw ConfigError("view_channels entries must be positive");
    }
    if (c.d_k < 1) throw ConfigError("d_k must be > 0");
    if (c.heatmap_len != d.d) throw ConfigError("heatmap_len must equal the input slice count");
    if (!(c.sigma > 0)) throw ConfigError("sigma must be > 0");
    if (c.raw_qkv && c.view_channels[3] != c.channels_3d[3]) {
        throw ConfigError("raw_qkv needs view_channels[3] == channels_3d[3]");
    }
    try {
        const int dz = backbone_extents(d.d, c, 0)[4];
        backbone_extents(d.h, c, 1);
        backbone_extents(d.w, c, 2);
        if (dz != d.d / 16) throw ConfigError("stride plan yields " + std::to_string(dz) + " tokens, expected D/16");
        if (view_extents(d.d)[3] != dz) throw ConfigError("view encoders and backbone disagree on the token count");
    } catch (const ShapeError& e) {
        throw ConfigError(std::string("stride plan does not fit the input: ") + e.what());
    }
}

LocNetConfig tiny_config() {
    LocNetConfig c;
    c.input_dims = {16, 8, 8};
    c.channels_3d = {2, 2, 3, 3};
    c.stride_plan = {{{2, 2, 2}, {2, 1, 1}, {2, 2, 2}, {2, 1, 1}, {1, 1, 1}}};
    c.view_channels = {2, 2, 3, 3};
    c.d_k = 4;
    c.heatmap_len = 16;
    c.sigma = 1.5;
    return c;
}

Dims feature_dims(const LocNetConfig& c) {
    return {backbone_extents(c.input_dims.d, c, 0)[4], backbone_extents(c.input_dims.h, c, 1)[4],
            backbone_extents(c.input_dims.w, c, 2)[4]};
}

nlohmann::json to_json(const LocNetConfig& c) {
    nlohmann::json plan = nlohmann::json::array();
    for (const auto& s : c.stride_plan) plan.push_back(s);
    return {{"input_dims", {c.input_dims.d, c.input_dims.h, c.input_dims.w}},
            {"channels_3d", c.channels_3d},
            {"stride_plan", plan},
            {"view_channels", c.view_channels},
            {"d_k", c.d_k},
            {"heatmap_len", c.heatmap_len},
            {"sigma", c.sigma},
            {"view_mode", to_string(c.view_mode)},
            {"target", to_string(c.target)},
            {"raw_qkv", c.raw_qkv},
            {"window", {{"level", c.window.level}, {"width", c.window.width}}},
            {"seed", c.seed}};
}

LocNetConfig config_from_json(const nlohmann::json& j) {
    LocNetConfig c;
    try {
        const auto d = j.at("input_dims").get<std::array<int, 3>>();
        c.input_dims = {d[0], d[1], d[2]};
        c.channels_3d = j.at("channels_3d").get<std::array<int, 4>>();
        c.stride_plan = j.at("stride_plan").get<std::array<Stride3, 5>>();
        c.view_channels = j.at("view_channels").get<std::array<int, 4>>();
        c.d_k = j.at("d_k").get<int>();
        c.heatmap_len = j.at("heatmap_len").get<int>();
        c.sigma = j.at("sigma").get<double>();
        c.view_mode = view_mode_from_string(j.at("view_mode").get<std::string>());
        c.target = target_kind_from_string(j.value("target", "gaussian"));
        c.raw_qkv = j.value("raw_qkv", false);
        if (j.contains("window")) c.window = {j["window"].at("level").get<double>(), j["window"].at("width").get<double>()};
        c.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad locnet config: ") + e.what());
    }
    validate(c);
    return c;
}

Tensor fuse_multiview(const Tensor& f_vol, const Tensor& f_cor, const Tensor& f_sag) {
    if (f_vol.shape() != f_cor.shape() || f_vol.shape() != f_sag.shape()) {
        throw ShapeError("fuse_multiview needs equal shapes, got vol " + ad::shape_str(f_vol.shape()) + ", cor " +
                         ad::shape_str(f_cor.shape()) + ", sag " + ad::shape_str(f_sag.shape()));
    }
    const Tensor a = ad::scaled_dot_attention(f_cor, f_vol, f_vol);
    const Tensor b = ad::scaled_dot_attention(f_sag, f_vol, f_vol);
    return ad::add(ad::add(a, b), f_vol);
}

PreparedVolume prepare(const Volume& v, const LocNetConfig& c) {
    PreparedVolume p;
    p.s_ori = v.spacing().sz;
    p.original_slices = v.dims().d;
    const Volume resampled = v.dims() == c.input_dims ? v : resample_trilinear(v, c.input_dims);
    p.s_res = resampled.spacing().sz;
    p.normalized = window_normalize(resampled, c.window);
    return p;
}

LocBatch make_batch(const std::vector<const Volume*>& vols) {
    if (vols.empty()) throw ContractError("empty batch");
    const Dims d = vols[0]->dims();
    const int n = static_cast<int>(vols.size());
    std::vector<double> vol, cor, sag;
    vol.reserve(static_cast<std::size_t>(n) * d.count());
    for (const Volume* v : vols) {
        if (!(v->dims() == d)) throw ShapeError("batch volumes differ in dims");
        vol.insert(vol.end(), v->voxels().begin(), v->voxels().end());
        const CenterViews views = extract_center_views(*v);
        cor.insert(cor.end(), views.coronal.pixels.begin(), views.coronal.pixels.end());
        sag.insert(sag.end(), views.sagittal.pixels.begin(), views.sagittal.pixels.end());
    }
    return {Tensor({n, 1, d.d, d.h, d.w}, std::move(vol)), Tensor({n, 1, d.d, d.w}, std::move(cor)),
            Tensor({n, 1, d.d, d.h}, std::move(sag))};
}

LocNet::LocNet(const LocNetConfig& config) : config_(config) {
    validate(config_);
    std::mt19937_64 rng(config_.seed);
    const auto& ch = config_.channels_3d;
    auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };

    const auto& s0 = config_.stride_plan[0];
    const int kd = stem_kernel(s0[0]), kh = stem_kernel(s0[1]), kw = stem_kernel(s0[2]);
    add("stem.w", {ch[0], 1, kd, kh, kw}, he(kd * kh * kw), rng);
    add("stem.b", {ch[0]}, 0.0, rng);
    int cin = ch[0];
    for (int st = 1; st <= 4; ++st) {
        const int cout = ch[static_cast<std::size_t>(st - 1)];
        const auto& s = config_.stride_plan[static_cast<std::size_t>(st)];
        for (int b = 0; b < 2; ++b) {
            const int ci = b == 0 ? cin : cout;
            add(stage_name(st, b, "conv1.w"), {cout, ci, 3, 3, 3}, he(ci * 27), rng);
            add(stage_name(st, b, "conv1.b"), {cout}, 0.0, rng);
            add(stage_name(st, b, "conv2.w"), {cout, cout, 3, 3, 3}, he(cout * 27), rng);
            add(stage_name(st, b, "conv2.b"), {cout}, 0.0, rng);
            const bool strided = b == 0 && (s[0] != 1 || s[1] != 1 || s[2] != 1);
            if (b == 0 && (strided || ci != cout)) {
                add(stage_name(st, b, "down.w"), {cout, ci, 1, 1, 1}, he(ci), rng);
                add(stage_name(st, b, "down.b"), {cout}, 0.0, rng);
            }
        }
        cin = cout;
    }
    const int tokens = feature_dims(config_).d;
    const int flat = tokens * ch[3];
    for (const char* head : {"head_start", "head_end"}) {
        add(std::string(head) + ".w", {config_.heatmap_len, flat}, std::sqrt(1.0 / flat), rng);
        add(std::string(head) + ".b", {config_.heatmap_len}, 0.0, rng);
    }
    // View-path parameters come last so both view modes share the backbone and head initialization.
    if (config_.view_mode == ViewMode::multi_view) {
        for (const char* view : {"cor", "sag"}) {
            int vin = 1;
            for (std::size_t j = 0; j < 4; ++j) {
                const int vout = config_.view_channels[j];
                add(std::string(view) + "." + std::to_string(j) + ".w", {vout, vin, 3, 3}, he(vin * 9), rng);
                add(std::string(view) + "." + std::to_string(j) + ".b", {vout}, 0.0, rng);
                vin = vout;
            }
            if (!config_.raw_qkv) {
                add(std::string("fuse.") + view + ".wq", {config_.d_k, config_.view_channels[3]},
                    std::sqrt(1.0 / config_.view_channels[3]), rng);
                add(std::string("fuse.") + view + ".wk", {config_.d_k, ch[3]}, std::sqrt(1.0 / ch[3]), rng);
            }
        }
    }
}

void LocNet::add(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
    std::vector<double> v(ad::shape_numel(shape), 0.0);
    if (stddev > 0) {
        std::normal_distribution<double> nd(0.0, stddev);
        for (auto& x : v) x = nd(rng);
    }
    names_.push_back(name);
    tensors_.emplace_back(std::move(shape), std::move(v), true);
}

std::size_t LocNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

bool LocNet::has_param(const std::string& name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

Tensor& LocNet::param(const std::string& name) {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ContractError("no parameter named " + name);
    return tensors_[static_cast<std::size_t>(it - names_.begin())];
}

const Tensor& LocNet::param(const std::string& name) const { return const_cast<LocNet*>(this)->param(name); }

Tensor LocNet::conv3(const Tensor& x, const std::string& name, const Stride3& s, int k_d, int k_h, int k_w) const {
    const Tensor& b = param(name + ".b");
    return ad::conv3d(x, param(name + ".w"), &b,
                      ad::Conv3dParams{s[0], s[1], s[2], (k_d - 1) / 2, (k_h - 1) / 2, (k_w - 1) / 2});
}

LocOutput LocNet::forward(const LocBatch& batch) const {
    const Dims& d = config_.input_dims;
    const int n = batch.vol.rank() == 5 ? batch.vol.dim(0) : 0;
    if (batch.vol.shape() != Shape{n, 1, d.d, d.h, d.w}) {
        throw ShapeError("volume input must be [N,1," + std::to_string(d.d) + "," + std::to_string(d.h) + "," +
                         std::to_string(d.w) + "], got " + ad::shape_str(batch.vol.shape()));
    }
    const auto& s0 = config_.stride_plan[0];
    Tensor x = ad::relu(conv3(batch.vol, "stem", s0, stem_kernel(s0[0]), stem_kernel(s0[1]), stem_kernel(s0[2])));
    for (int st = 1; st <= 4; ++st) {
        const auto& s = config_.stride_plan[static_cast<std::size_t>(st)];
        for (int b = 0; b < 2; ++b) {
            const Stride3 one{1, 1, 1};
            const Stride3& sb = b == 0 ? s : one;
            Tensor y = ad::relu(conv3(x, stage_name(st, b, "conv1"), sb, 3, 3, 3));
            y = conv3(y, stage_name(st, b, "conv2"), one, 3, 3, 3);
            const std::string down = stage_name(st, b, "down");
            const Tensor shortcut = has_param(down + ".w") ? conv3(x, down, sb, 1, 1, 1) : x;
            x = ad::relu(ad::add(y, shortcut));
        }
    }
    LocOutput out;
    LocFeatures& f = out.features;
    f.f_vol = ad::transpose_last2(ad::mean_trailing(x, 2));  // [N, D', C]
    if (config_.view_mode == ViewMode::multi_view) {
        if (batch.cor.shape() != Shape{n, 1, d.d, d.w} || batch.sag.shape() != Shape{n, 1, d.d, d.h}) {
            throw ShapeError("view inputs must be [N,1,D,W] (coronal) and [N,1,D,H] (sagittal)");
        }
        auto encode = [&](const Tensor& in, const std::string& view) {
            Tensor y = in;
            for (int j = 0; j < 4; ++j) {
                const Tensor& b = param(view + "." + std::to_string(j) + ".b");
                y = ad::relu(ad::conv2d(y, param(view + "." + std::to_string(j) + ".w"), &b, ad::Conv2dParams{2, 2, 1, 1}));
            }
            return ad::transpose_last2(ad::mean_trailing(y, 1));
        };
        f.f_cor = encode(batch.cor, "cor");
        f.f_sag = encode(batch.sag, "sag");
        if (config_.raw_qkv) {
            f.attn_cor = ad::scaled_dot_attention(f.f_cor, f.f_vol, f.f_vol);
            f.attn_sag = ad::scaled_dot_attention(f.f_sag, f.f_vol, f.f_vol);
        } else {
            const Tensor k_cor = ad::linear(f.f_vol, param("fuse.cor.wk"));
            const Tensor k_sag = ad::linear(f.f_vol, param("fuse.sag.wk"));
            f.attn_cor = ad::scaled_dot_attention(ad::linear(f.f_cor, param("fuse.cor.wq")), k_cor, f.f_vol);
            f.attn_sag = ad::scaled_dot_attention(ad::linear(f.f_sag, param("fuse.sag.wq")), k_sag, f.f_vol);
        }
        f.f_fused = ad::add(ad::add(f.attn_cor, f.attn_sag), f.f_vol);
    } else {
        f.f_fused = f.f_vol;
    }
    const Tensor flat = ad::reshape(f.f_fused, {n, f.f_fused.dim(1) * f.f_fused.dim(2)});
    const Tensor& bs = param("head_start.b");
    const Tensor& be = param("head_end.b");
    out.start = ad::softmax(ad::linear(flat, param("head_start.w"), &bs), -1);
    out.end = ad::softmax(ad::linear(flat, param("head_end.w"), &be), -1);
    return out;
}

TrainResult train(LocNet& model, const std::vector<LocSample>& data, const TrainOptions& opt) {
    if (data.empty()) throw ContractError("training set is empty");
    const LocNetConfig& c = model.config();
    for (const auto& s : data) {
        if (!s.normalized || !(s.normalized->dims() == c.input_dims)) throw ShapeError("sample not prepared for this config");
        validate_label(s.label, c.heatmap_len);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const LocBatch batch = batch_of(data);
    const Tensor ts = targets(data, c, true), te = targets(data, c, false);
    const int n = static_cast<int>(data.size());
    ad::AdamState adam;
    adam.lr = opt.lr;
    TrainResult r;
    auto params = model.parameters();
    for (int it = 0; it < opt.iterations; ++it) {
        ad::Tape tape;
        double loss_value = 0.0;
        try {
            const Tensor loss = batch_loss(model.forward(batch), ts, te, n);
            loss_value = loss.item();
            if (!std::isfinite(loss_value)) throw TrainingError("non-finite loss", it);
            tape.backward(loss);
        } catch (const ContractError& e) {
            throw TrainingError(std::string("non-finite value during training: ") + e.what(), it);
        }
        ad::adam_step(params, adam);
        for (auto& p : params) p.zero_grad();
        r.loss_history.push_back(loss_value);
        r.iterations = it + 1;
        r.final_loss = loss_value;
        if (opt.on_iteration && !opt.on_iteration(it, loss_value)) break;
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

double evaluate_loss(const LocNet& model, const std::vector<LocSample>& data) {
    if (data.empty()) throw ContractError("evaluation set is empty");
    const LocNetConfig& c = model.config();
    return batch_loss(model.forward(batch_of(data)), targets(data, c, true), targets(data, c, false),
                      static_cast<int>(data.size()))
        .item();
}

LocLabel to_prepared_label(const LocLabel& l, const PreparedVolume& p, int heatmap_len) {
    auto map = [&](int i) {
        return std::clamp(static_cast<int>(std::lround(i * p.s_ori / p.s_res)), 0, heatmap_len - 1);
    };
    return {map(l.start_idx), map(l.end_idx)};
}

std::vector<LocSample> PreparedSet::samples() const {
    std::vector<LocSample> out;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        out.push_back({&volumes[i].normalized, to_prepared_label(labels[i], volumes[i], heatmap_len)});
    }
    return out;
}

PreparedSet prepare_set(const std::vector<Volume>& volumes, const std::vector<LocLabel>& labels, const LocNetConfig& c) {
    if (volumes.size() != labels.size()) throw ContractError("prepare_set needs one label per volume");
    PreparedSet set;
    set.heatmap_len = c.heatmap_len;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        validate_label(labels[i], volumes[i].dims().d);
        set.volumes.push_back(prepare(volumes[i], c));
        set.labels.push_back(labels[i]);
    }
    return set;
}

LocPrediction predict_prepared(const LocNet& model, const PreparedVolume& p) {
    const LocOutput out = model.forward(make_batch({&p.normalized}));
    LocPrediction r;
    r.start_probs.assign(out.start.data().begin(), out.start.data().end());
    r.end_probs.assign(out.end.data().begin(), out.end.data().end());
    r.start_res = static_cast<int>(decode(r.start_probs));
    r.end_res = static_cast<int>(decode(r.end_probs));
    if (r.start_res > r.end_res) {
        std::swap(r.start_res, r.end_res);
        r.swapped = true;
    }
    r.start = std::clamp(to_original_index(r.start_res, p.s_res, p.s_ori), 0, p.original_slices - 1);
    r.end = std::clamp(to_original_index(r.end_res, p.s_res, p.s_ori), 0, p.original_slices - 1);
    return r;
}

LocPrediction predict(const LocNet& model, const Volume& raw) { return predict_prepared(model, prepare(raw, model.config())); }

void save_checkpoint(const std::filesystem::path& path, const LocNet& model, const CheckpointMeta& meta) {
    ad::TensorBlob blob;
    blob.meta = {{"kind", "locnet"},
                 {"version", 1},
                 {"config", to_json(model.config())},
                 {"iterations", meta.iterations},
                 {"final_loss", meta.final_loss}};
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) blob.tensors.push_back({model.names()[i], params[i]});
    ad::save_blob(path, blob);
}

LocNet load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
    const ad::TensorBlob blob = ad::load_blob(path);
    if (blob.meta.value("kind", "") != "locnet" || !blob.meta.contains("config")) {
        throw FormatError(path.string() + " is not a locnet checkpoint");
    }
    LocNet model(config_from_json(blob.meta["config"]));
    if (blob.tensors.size() != model.names().size()) {
        throw ValidationError("checkpoint holds " + std::to_string(blob.tensors.size()) + " tensors, config implies " +
                              std::to_string(model.names().size()));
    }
    for (const auto& nt : blob.tensors) {
        if (!model.has_param(nt.name)) throw ValidationError("checkpoint tensor '" + nt.name + "' is not part of the model");
        Tensor& p = model.param(nt.name);
        if (p.shape() != nt.tensor.shape()) {
            throw ValidationError("checkpoint tensor '" + nt.name + "' has shape " + ad::shape_str(nt.tensor.shape()) +
                                  ", config implies " + ad::shape_str(p.shape()));
        }
        std::copy(nt.tensor.data().begin(), nt.tensor.data().end(), p.mutable_data().begin());
    }
    if (meta) {
        meta->iterations = blob.meta.value("iterations", 0);
        meta->final_loss = blob.meta.value("final_loss", 0.0);
    }
    return model;
}

}  // namespace abdkit
