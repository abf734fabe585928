#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "abdkit/heatmap.hpp"
#include "abdkit/tensor.hpp"
#include "abdkit/volume.hpp"

namespace abdkit {

enum class ViewMode { multi_view, volume_only };
enum class TargetKind { gaussian, onehot };

std::string to_string(ViewMode m);
ViewMode view_mode_from_string(const std::string& s);
std::string to_string(TargetKind k);
TargetKind target_kind_from_string(const std::string& s);

/// Per-axis stride (slice, row, column).
using Stride3 = std::array<int, 3>;

struct LocNetConfig {
    Dims input_dims{128, 32, 32};
    std::array<int, 4> channels_3d{8, 16, 32, 64};
    /// Stem followed by the four residual stages. The slice-axis strides must multiply to 16.
    std::array<Stride3, 5> stride_plan{{{2, 4, 4}, {2, 1, 1}, {2, 2, 2}, {2, 2, 2}, {1, 1, 1}}};
    std::array<int, 4> view_channels{8, 16, 32, 64};
    int d_k = 32;
    int heatmap_len = 128;
    double sigma = 2.0;
    ViewMode view_mode = ViewMode::multi_view;
    TargetKind target = TargetKind::gaussian;
    /// Attention directly on the features (no learned Q/K maps); needs equal feature dims.
    bool raw_qkv = false;
    WindowSpec window;
    std::uint64_t seed = 0;
};

/// Throws ConfigError when the plan cannot produce D' = D / 16 tokens.
void validate(const LocNetConfig& c);
/// Small configuration (D=16, H=W=8, one token) used for whole-model gradient checks.
LocNetConfig tiny_config();
/// Token count D' and the backbone's final in-plane extent.
Dims feature_dims(const LocNetConfig& c);

nlohmann::json to_json(const LocNetConfig& c);
LocNetConfig config_from_json(const nlohmann::json& j);

/// Dual cross-attention with residual, raw form:
/// softmax(f_cor f_vol^T / sqrt(C)) f_vol + softmax(f_sag f_vol^T / sqrt(C)) f_vol + f_vol.
/// All inputs [(N,) D', C].
ad::Tensor fuse_multiview(const ad::Tensor& f_vol, const ad::Tensor& f_cor, const ad::Tensor& f_sag);

struct LocFeatures {
    ad::Tensor f_vol;  ///< [N, D', C]
    ad::Tensor f_cor;  ///< [N, D', C_v]
    ad::Tensor f_sag;
    ad::Tensor attn_cor;  ///< coronal attention term, [N, D', C]; empty in volume_only mode
    ad::Tensor attn_sag;
    ad::Tensor f_fused;
};

struct LocOutput {
    ad::Tensor start;  ///< [N, L] probabilities
    ad::Tensor end;
    LocFeatures features;
};

/// Network inputs for a batch: vol [N,1,D,H,W], cor [N,1,D,W], sag [N,1,D,H].
struct LocBatch {
    ad::Tensor vol;
    ad::Tensor cor;
    ad::Tensor sag;
};

/// Resamples to the configured grid, windows to [0, 1] and extracts the centre views.
struct PreparedVolume {
    Volume normalized;   ///< on input_dims
    double s_res = 1.0;  ///< slice spacing after resampling
    double s_ori = 1.0;
    int original_slices = 0;
};
PreparedVolume prepare(const Volume& v, const LocNetConfig& c);
LocBatch make_batch(const std::vector<const Volume*>& normalized);

class LocNet {
public:
    explicit LocNet(const LocNetConfig& config);

    const LocNetConfig& config() const { return config_; }
    /// Handles alias the model's storage, in a fixed order matching names().
    std::span<ad::Tensor> parameters() { return tensors_; }
    std::span<const ad::Tensor> parameters() const { return tensors_; }
    const std::vector<std::string>& names() const { return names_; }
    std::size_t parameter_count() const;
    ad::Tensor& param(const std::string& name);
    const ad::Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const;

    LocOutput forward(const LocBatch& batch) const;

private:
    void add(const std::string& name, ad::Shape shape, double stddev, std::mt19937_64& rng);
    ad::Tensor conv3(const ad::Tensor& x, const std::string& name, const Stride3& s, int k_d, int k_h, int k_w) const;

    LocNetConfig config_;
    std::vector<std::string> names_;
    std::vector<ad::Tensor> tensors_;
};

struct LocSample {
    const Volume* normalized = nullptr;  ///< already prepared, dims == input_dims
    LocLabel label;                      ///< on the prepared grid
};

struct TrainOptions {
    int iterations = 500;
    double lr = 1e-3;
    /// Called after every iteration with (iteration, loss); return false to stop early.
    std::function<bool(int, double)> on_iteration;
};

struct TrainResult {
    std::vector<double> loss_history;
    int iterations = 0;
    double final_loss = 0.0;
    double seconds = 0.0;
};

/// Full-batch Adam on the summed start/end KL loss, averaged over the batch.
/// Throws TrainingError with the iteration index on a non-finite loss.
TrainResult train(LocNet& model, const std::vector<LocSample>& data, const TrainOptions& opt);

/// Batch loss without recording gradients.
double evaluate_loss(const LocNet& model, const std::vector<LocSample>& data);

struct LocPrediction {
    int start = 0;  ///< on the original grid
    int end = 0;
    int start_res = 0;  ///< on the prepared grid
    int end_res = 0;
    bool swapped = false;  ///< decoded start > end; the pair was swapped
    std::vector<double> start_probs;
    std::vector<double> end_probs;
};

LocPrediction predict(const LocNet& model, const Volume& raw);
/// Same, for a volume already run through prepare().
LocPrediction predict_prepared(const LocNet& model, const PreparedVolume& p);

/// Maps an original-grid label onto the prepared grid, clamped to [0, L).
LocLabel to_prepared_label(const LocLabel& l, const PreparedVolume& p, int heatmap_len);

/// Prepared training volumes with their original-grid labels.
struct PreparedSet {
    std::vector<PreparedVolume> volumes;
    std::vector<LocLabel> labels;
    int heatmap_len = 0;

    /// Samples pointing into `volumes`; valid while this set is alive and unchanged.
    std::vector<LocSample> samples() const;
};
PreparedSet prepare_set(const std::vector<Volume>& volumes, const std::vector<LocLabel>& labels, const LocNetConfig& c);

struct CheckpointMeta {
    int iterations = 0;
    double final_loss = 0.0;
};

void save_checkpoint(const std::filesystem::path& path, const LocNet& model, const CheckpointMeta& meta);
/// Throws FormatError/ValidationError if a tensor is missing or its shape disagrees with the config.
LocNet load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace abdkit
