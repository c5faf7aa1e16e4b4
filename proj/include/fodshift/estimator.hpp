#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fodshift/phantom.hpp"
#include "fodshift/rng.hpp"
#include "fodshift/volume.hpp"

namespace fodshift {

inline constexpr int kSixShCoeffs = 6;
inline constexpr int kNeighborhood = 27;
inline constexpr int kFeatureDim = kSixShCoeffs * kNeighborhood;

/// Per-voxel lmax 2 SH coefficients of the b0-normalized six-direction signal.
Volume<float> six_sh_volume(const Subject& subject, std::span<const int> six_indices);

/// Features of every voxel (kFeatureDim x n_voxels): the 3x3x3 neighborhood of
/// six_sh_volume, zero outside the grid, neighbor order z, y, x slowest to fastest.
Eigen::MatrixXf featurize(const Subject& subject, std::span<const int> six_indices);
Eigen::MatrixXf featurize(const Volume<float>& sh);

/// Fully connected ReLU network with inverted dropout on hidden layers.
template <class Scalar>
struct Mlp {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    std::vector<int> layer_dims;
    std::vector<Matrix> weights;  // out x in
    std::vector<Vector> biases;
    double dropout = 0.0;
    std::uint64_t seed = 0;

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    std::size_t parameter_count() const;
    void validate() const;

    template <class T>
    Mlp<T> cast() const {
        Mlp<T> out;
        out.layer_dims = layer_dims;
        out.dropout = dropout;
        out.seed = seed;
        for (const auto& w : weights) out.weights.push_back(w.template cast<T>());
        for (const auto& b : biases) out.biases.push_back(b.template cast<T>());
        return out;
    }
    friend bool operator==(const Mlp& a, const Mlp& b) {
        return a.layer_dims == b.layer_dims && a.dropout == b.dropout && a.seed == b.seed && a.weights == b.weights &&
               a.biases == b.biases;
    }
};

using EstimatorModel = Mlp<float>;

/// Xavier-uniform weights, zero biases.
template <class Scalar>
Mlp<Scalar> make_mlp(const std::vector<int>& layer_dims, double dropout, std::uint64_t seed);

EstimatorModel make_estimator(std::uint64_t seed, std::vector<int> hidden = {256, 256}, double dropout = 0.1, int lmax = 8);

/// Columns are samples. With train_mode the hidden activations are dropped
/// using `rng`, which must then be non-null.
template <class Scalar>
typename Mlp<Scalar>::Matrix forward(const Mlp<Scalar>& model, const typename Mlp<Scalar>::Matrix& x, bool train_mode,
                                     Rng* rng = nullptr);

/// Mean over samples and coefficients of the squared difference.
template <class Scalar>
double loss_mse(const typename Mlp<Scalar>::Matrix& pred, const typename Mlp<Scalar>::Matrix& gt);

template <class Scalar>
struct Gradients {
    std::vector<typename Mlp<Scalar>::Matrix> weights;
    std::vector<typename Mlp<Scalar>::Vector> biases;
    double loss = 0.0;
};

/// Exact gradient of loss_mse. Dropout masks are drawn from `rng` when
/// train_mode is set, in the same order forward() draws them.
template <class Scalar>
Gradients<Scalar> backward(const Mlp<Scalar>& model, const typename Mlp<Scalar>::Matrix& x,
                           const typename Mlp<Scalar>::Matrix& gt, bool train_mode = false, Rng* rng = nullptr);

struct TrainConfig {
    int epochs = 200;
    double lr = 5e-5;
    double weight_decay = 1e-3;
    int batch_size = 35;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    double val_fraction = 0.1;  // held-out share of the target when fine-tuning

    void validate() const;
    static TrainConfig training_defaults() { return {}; }
    static TrainConfig finetune_defaults();
    /// Training schedule with the full 1000-epoch budget.
    static TrainConfig paper_defaults();
};

template <class Scalar>
struct AdamState {
    std::vector<typename Mlp<Scalar>::Matrix> m_w, v_w;
    std::vector<typename Mlp<Scalar>::Vector> m_b, v_b;
    std::int64_t step = 0;

    static AdamState zeros_like(const Mlp<Scalar>& model);
};

/// Bias-corrected Adam step followed by decoupled decay p *= 1 - lr * weight_decay.
template <class Scalar>
void adam_step(Mlp<Scalar>& model, const Gradients<Scalar>& grads, AdamState<Scalar>& state, const TrainConfig& config);

/// Samples (columns) with the ids of the subjects they came from.
struct Dataset {
    Eigen::MatrixXf x;  // kFeatureDim x n
    Eigen::MatrixXf y;  // n_coeffs x n
    std::vector<std::string> subject_ids;
    // Column counts per subject, in column order. Empty once columns are reordered by select().
    std::vector<Eigen::Index> subject_sizes;

    Eigen::Index size() const { return x.cols(); }
    void append(const Dataset& other);
    Dataset select(std::span<const Eigen::Index> columns) const;
};

/// WM voxels of the given subjects, all acquired with the same six directions.
Dataset make_dataset(std::span<const Subject* const> subjects, std::span<const int> six_indices);

struct TrainHistory {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_loss;    // per epoch
    double initial_val_loss = 0.0;
    int best_epoch = 0;  // 1-based
    double best_val_loss = 0.0;
    std::vector<std::string> train_subjects;
    std::vector<std::string> val_subjects;
};

struct TrainResult {
    EstimatorModel model;
    TrainHistory history;
};

/// 1-based epoch of the first minimum.
int best_epoch_of(std::span<const double> val_loss);

/// Epoch loop over shuffled batches; returns the parameters with the lowest
/// validation MSE. Throws TrainingFailure on a non-finite loss.
TrainResult train(const EstimatorModel& init, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config);

/// Continues training on target data. A seeded val_fraction of the target
/// subjects (at least one) is held out for model selection; a single-subject
/// target holds out that fraction of its voxels instead.
TrainResult fine_tune(const EstimatorModel& model, const Dataset& target, const TrainConfig& config);

double evaluate_mse(const EstimatorModel& model, const Dataset& data);

/// Eval-mode prediction for WM voxels; other voxels are zero.
Volume<float> predict_volume(const EstimatorModel& model, const Subject& subject, std::span<const int> six_indices);

}  // namespace fodshift
