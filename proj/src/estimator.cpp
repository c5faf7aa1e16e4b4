#include "fodshift/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fodshift/error.hpp"
#include "fodshift/geometry.hpp"
#include "fodshift/harmonize.hpp"

namespace fodshift {

Volume<float> six_sh_volume(const Subject& subject, std::span<const int> six_indices) {
    const Volume<float> six = normalized_six(subject, six_indices);
    const DirectionSet dirs = subject.gradients.subset(six_indices);
    const Eigen::MatrixXd fit = sh_fit_matrix(dirs, 2);
    Volume<float> out(subject.dims, kSixShCoeffs);
    Eigen::VectorXd s(6);
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        for (int c = 0; c < 6; ++c) s(c) = six(v, c);
        const Eigen::VectorXd c = fit * s;
        for (int j = 0; j < kSixShCoeffs; ++j) out(v, j) = static_cast<float>(c(j));
    }
    return out;
}

Eigen::MatrixXf featurize(const Volume<float>& sh) {
    if (sh.channels() != kSixShCoeffs) throw InvalidArgument("features need six SH coefficients per voxel");
    const Dims d = sh.dims();
    Eigen::MatrixXf out = Eigen::MatrixXf::Zero(kFeatureDim, static_cast<Eigen::Index>(d.voxels()));
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const auto col = static_cast<Eigen::Index>(d.index(x, y, z));
                int slot = 0;
                for (int dz = -1; dz <= 1; ++dz)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx, ++slot) {
                            if (!d.contains(x + dx, y + dy, z + dz)) continue;
                            const auto nb = sh.voxel(d.index(x + dx, y + dy, z + dz));
                            for (int j = 0; j < kSixShCoeffs; ++j) out(slot * kSixShCoeffs + j, col) = nb[static_cast<std::size_t>(j)];
                        }
            }
    return out;
}

Eigen::MatrixXf featurize(const Subject& subject, std::span<const int> six_indices) {
    return featurize(six_sh_volume(subject, six_indices));
}

template <class Scalar>
std::size_t Mlp<Scalar>::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
}

template <class Scalar>
void Mlp<Scalar>::validate() const {
    if (layer_dims.size() < 2) throw InvalidArgument("network needs at least an input and an output layer");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
    if (weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
        throw InvalidArgument("layer count does not match layer_dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (weights[l].rows() != layer_dims[l + 1] || weights[l].cols() != layer_dims[l] || biases[l].size() != layer_dims[l + 1])
            throw InvalidArgument("layer " + std::to_string(l) + " has incompatible shape");
        if (!weights[l].allFinite() || !biases[l].allFinite()) throw InvalidArgument("non-finite parameters");
    }
}

template <class Scalar>
Mlp<Scalar> make_mlp(const std::vector<int>& layer_dims, double dropout, std::uint64_t seed) {
    if (layer_dims.size() < 2) throw InvalidArgument("network needs at least an input and an output layer");
    for (int d : layer_dims)
        if (d < 1) throw InvalidArgument("layer sizes must be positive");
    Mlp<Scalar> m;
    m.layer_dims = layer_dims;
    m.dropout = dropout;
    m.seed = seed;
    Rng rng(derive_seed(seed, "init"));
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const int in = layer_dims[l], out = layer_dims[l + 1];
        const double a = std::sqrt(6.0 / (in + out));
        typename Mlp<Scalar>::Matrix w(out, in);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(rng.uniform(-a, a));
        m.weights.push_back(std::move(w));
        m.biases.push_back(Mlp<Scalar>::Vector::Zero(out));
    }
    m.validate();
    return m;
}

EstimatorModel make_estimator(std::uint64_t seed, std::vector<int> hidden, double dropout, int lmax) {
    std::vector<int> dims{kFeatureDim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(sh_n_coeffs(lmax));
    return make_mlp<float>(dims, dropout, seed);
}

namespace {

template <class Scalar>
struct Pass {
    std::vector<typename Mlp<Scalar>::Matrix> act;   // act[0] = input, act[l] = output of layer l
    std::vector<typename Mlp<Scalar>::Matrix> mask;  // dropout scale per hidden layer (empty if none)
};

template <class Scalar>
Pass<Scalar> run_forward(const Mlp<Scalar>& model, const typename Mlp<Scalar>::Matrix& x, bool train_mode, Rng* rng) {
    using Matrix = typename Mlp<Scalar>::Matrix;
    if (x.rows() != model.input_dim()) throw InvalidArgument("feature length does not match the network input");
    const bool drop = train_mode && model.dropout > 0.0;
    if (drop && rng == nullptr) throw InvalidArgument("dropout in train mode needs a generator");
    const std::size_t n_layers = model.weights.size();
    Pass<Scalar> p;
    p.act.reserve(n_layers + 1);
    p.act.push_back(x);
    p.mask.resize(n_layers);
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - model.dropout));
    for (std::size_t l = 0; l < n_layers; ++l) {
        Matrix z = model.weights[l] * p.act.back();
        z.colwise() += model.biases[l];
        if (l + 1 < n_layers) {
            z = z.cwiseMax(Scalar(0));
            if (drop) {
                Matrix m(z.rows(), z.cols());
                for (Eigen::Index j = 0; j < m.cols(); ++j)
                    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng->uniform() < model.dropout ? Scalar(0) : keep_scale;
                z = z.cwiseProduct(m);
                p.mask[l] = std::move(m);
            }
        }
        p.act.push_back(std::move(z));
    }
    return p;
}

}  // namespace

template <class Scalar>
typename Mlp<Scalar>::Matrix forward(const Mlp<Scalar>& model, const typename Mlp<Scalar>::Matrix& x, bool train_mode, Rng* rng) {
    return std::move(run_forward(model, x, train_mode, rng).act.back());
}

template <class Scalar>
double loss_mse(const typename Mlp<Scalar>::Matrix& pred, const typename Mlp<Scalar>::Matrix& gt) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw InvalidArgument("prediction and target shapes differ");
    if (pred.size() == 0) throw InvalidArgument("empty batch");
    return (pred - gt).template cast<double>().squaredNorm() / static_cast<double>(pred.size());
}

template <class Scalar>
Gradients<Scalar> backward(const Mlp<Scalar>& model, const typename Mlp<Scalar>::Matrix& x,
                           const typename Mlp<Scalar>::Matrix& gt, bool train_mode, Rng* rng) {
    using Matrix = typename Mlp<Scalar>::Matrix;
    const Pass<Scalar> p = run_forward(model, x, train_mode, rng);
    const std::size_t n_layers = model.weights.size();
    Gradients<Scalar> g;
    g.loss = loss_mse<Scalar>(p.act.back(), gt);
    g.weights.resize(n_layers);
    g.biases.resize(n_layers);
    Matrix delta = (p.act.back() - gt) * static_cast<Scalar>(2.0 / static_cast<double>(gt.size()));
    for (std::size_t l = n_layers; l-- > 0;) {
        g.weights[l] = delta * p.act[l].transpose();
        g.biases[l] = delta.rowwise().sum();
        if (l == 0) break;
        Matrix back = model.weights[l].transpose() * delta;
        // act[l] is relu(z) times the dropout scale, so it is zero wherever
        // either the ReLU or dropout blocks the gradient.
        const Matrix& a = p.act[l];
        const bool has_mask = p.mask[l - 1].size() > 0;
        for (Eigen::Index j = 0; j < back.cols(); ++j)
            for (Eigen::Index i = 0; i < back.rows(); ++i) {
                if (a(i, j) <= Scalar(0))
                    back(i, j) = Scalar(0);
                else if (has_mask)
                    back(i, j) *= p.mask[l - 1](i, j);
            }
        delta = std::move(back);
    }
    return g;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be at least 1");
    if (!(lr >= 0.0)) throw InvalidArgument("learning rate must be nonnegative");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be nonnegative");
    if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw InvalidArgument("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw InvalidArgument("Adam eps must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("validation fraction must lie in (0, 1)");
}

TrainConfig TrainConfig::finetune_defaults() {
    TrainConfig c;
    c.epochs = 100;
    c.lr = 5e-6;
    c.batch_size = 10;
    return c;
}

TrainConfig TrainConfig::paper_defaults() {
    TrainConfig c;
    c.epochs = 1000;
    return c;
}

template <class Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros_like(const Mlp<Scalar>& model) {
    AdamState s;
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        s.m_w.push_back(Mlp<Scalar>::Matrix::Zero(model.weights[l].rows(), model.weights[l].cols()));
        s.v_w.push_back(s.m_w.back());
        s.m_b.push_back(Mlp<Scalar>::Vector::Zero(model.biases[l].size()));
        s.v_b.push_back(s.m_b.back());
    }
    return s;
}

namespace {

template <class Scalar, class P, class G>
void adam_update(P& param, const G& grad, P& m, P& v, double b1, double b2, double lr_t, double eps_t, double decay) {
    const auto sb1 = static_cast<Scalar>(b1), sb2 = static_cast<Scalar>(b2);
    m = sb1 * m + (Scalar(1) - sb1) * grad;
    v = sb2 * v + (Scalar(1) - sb2) * grad.cwiseProduct(grad);
    param.array() -= static_cast<Scalar>(lr_t) * m.array() / (v.array().sqrt() + static_cast<Scalar>(eps_t));
    if (decay != 1.0) param *= static_cast<Scalar>(decay);
}

}  // namespace

template <class Scalar>
void adam_step(Mlp<Scalar>& model, const Gradients<Scalar>& grads, AdamState<Scalar>& state, const TrainConfig& config) {
    if (grads.weights.size() != model.weights.size() || state.m_w.size() != model.weights.size())
        throw InvalidArgument("gradient or optimizer state does not match the model");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.adam_beta1, t), c2 = 1.0 - std::pow(config.adam_beta2, t);
    // m_hat / (sqrt(v_hat) + eps) = (m / c1) / (sqrt(v / c2) + eps), folded into one step size.
    const double lr_t = config.lr * std::sqrt(c2) / c1;
    const double eps_t = config.adam_eps * std::sqrt(c2);
    const double decay = 1.0 - config.lr * config.weight_decay;
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        adam_update<Scalar>(model.weights[l], grads.weights[l], state.m_w[l], state.v_w[l], config.adam_beta1, config.adam_beta2,
                            lr_t, eps_t, decay);
        adam_update<Scalar>(model.biases[l], grads.biases[l], state.m_b[l], state.v_b[l], config.adam_beta1, config.adam_beta2,
                            lr_t, eps_t, decay);
    }
}

void Dataset::append(const Dataset& other) {
    if (other.size() == 0) return;
    if (size() > 0 && (x.rows() != other.x.rows() || y.rows() != other.y.rows())) throw InvalidArgument("dataset shapes differ");
    Eigen::MatrixXf nx(other.x.rows(), size() + other.size()), ny(other.y.rows(), size() + other.size());
    if (size() > 0) {
        nx.leftCols(size()) = x;
        ny.leftCols(size()) = y;
    }
    nx.rightCols(other.size()) = other.x;
    ny.rightCols(other.size()) = other.y;
    x = std::move(nx);
    y = std::move(ny);
    const bool sized = subject_sizes.size() == subject_ids.size() && other.subject_sizes.size() == other.subject_ids.size();
    subject_ids.insert(subject_ids.end(), other.subject_ids.begin(), other.subject_ids.end());
    if (sized)
        subject_sizes.insert(subject_sizes.end(), other.subject_sizes.begin(), other.subject_sizes.end());
    else
        subject_sizes.clear();
}

Dataset Dataset::select(std::span<const Eigen::Index> columns) const {
    Dataset d;
    d.x.resize(x.rows(), static_cast<Eigen::Index>(columns.size()));
    d.y.resize(y.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t i = 0; i < columns.size(); ++i) {
        d.x.col(static_cast<Eigen::Index>(i)) = x.col(columns[i]);
        d.y.col(static_cast<Eigen::Index>(i)) = y.col(columns[i]);
    }
    d.subject_ids = subject_ids;
    return d;
}

Dataset make_dataset(std::span<const Subject* const> subjects, std::span<const int> six_indices) {
    Dataset out;
    for (const Subject* s : subjects) {
        const Eigen::MatrixXf f = featurize(*s, six_indices);
        std::vector<Eigen::Index> wm;
        for (std::size_t v = 0; v < s->dims.voxels(); ++v)
            if (s->wm_mask(v)) wm.push_back(static_cast<Eigen::Index>(v));
        Dataset d;
        d.x.resize(kFeatureDim, static_cast<Eigen::Index>(wm.size()));
        d.y.resize(s->gt_fod.channels(), static_cast<Eigen::Index>(wm.size()));
        for (std::size_t i = 0; i < wm.size(); ++i) {
            d.x.col(static_cast<Eigen::Index>(i)) = f.col(wm[i]);
            const auto g = s->gt_fod.voxel(static_cast<std::size_t>(wm[i]));
            for (int c = 0; c < s->gt_fod.channels(); ++c) d.y(c, static_cast<Eigen::Index>(i)) = g[static_cast<std::size_t>(c)];
        }
        d.subject_ids = {s->id};
        d.subject_sizes = {d.size()};
        out.append(d);
    }
    return out;
}

double evaluate_mse(const EstimatorModel& model, const Dataset& data) {
    if (data.size() == 0) throw InvalidArgument("empty evaluation set");
    constexpr Eigen::Index chunk = 4096;
    double acc = 0.0;
    for (Eigen::Index start = 0; start < data.size(); start += chunk) {
        const Eigen::Index n = std::min(chunk, data.size() - start);
        const Eigen::MatrixXf pred = forward<float>(model, data.x.middleCols(start, n), false);
        acc += (pred - data.y.middleCols(start, n)).cast<double>().squaredNorm();
    }
    return acc / static_cast<double>(data.y.size());
}

int best_epoch_of(std::span<const double> val_loss) {
    if (val_loss.empty()) throw InvalidArgument("empty validation history");
    return static_cast<int>(std::min_element(val_loss.begin(), val_loss.end()) - val_loss.begin()) + 1;
}

TrainResult train(const EstimatorModel& init, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config) {
    config.validate();
    init.validate();
    if (train_set.size() == 0 || val_set.size() == 0) throw InvalidArgument("training and validation sets must be nonempty");
    if (train_set.x.rows() != init.input_dim() || train_set.y.rows() != init.output_dim())
        throw InvalidArgument("dataset shape does not match the network");

    TrainResult res{init, {}};
    TrainHistory& h = res.history;
    h.train_subjects = train_set.subject_ids;
    h.val_subjects = val_set.subject_ids;
    h.initial_val_loss = evaluate_mse(init, val_set);

    EstimatorModel model = init;
    AdamState<float> state = AdamState<float>::zeros_like(model);
    Rng rng(derive_seed(config.seed, "train"));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_set.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Eigen::MatrixXf xb, yb;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(order);
        double acc = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
            xb.resize(train_set.x.rows(), static_cast<Eigen::Index>(n));
            yb.resize(train_set.y.rows(), static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                xb.col(static_cast<Eigen::Index>(i)) = train_set.x.col(order[start + i]);
                yb.col(static_cast<Eigen::Index>(i)) = train_set.y.col(order[start + i]);
            }
            const Gradients<float> g = backward<float>(model, xb, yb, true, &rng);
            if (!std::isfinite(g.loss)) throw TrainingFailure("non-finite training loss", epoch);
            adam_step(model, g, state, config);
            acc += g.loss * static_cast<double>(n);
        }
        const double val = evaluate_mse(model, val_set);
        if (!std::isfinite(val)) throw TrainingFailure("non-finite validation loss", epoch);
        h.train_loss.push_back(acc / static_cast<double>(order.size()));
        h.val_loss.push_back(val);
        if (epoch == 1 || val < h.best_val_loss) {
            h.best_val_loss = val;
            h.best_epoch = epoch;
            res.model = model;
        }
    }
    return res;
}

TrainResult fine_tune(const EstimatorModel& model, const Dataset& target, const TrainConfig& config) {
    config.validate();
    if (target.size() < 2) throw InvalidArgument("fine-tuning needs at least two target voxels");
    Rng rng(derive_seed(config.seed, "holdout"));
    const auto held_out = [&](std::size_t n) {
        return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(config.val_fraction * static_cast<double>(n))), 1, n - 1);
    };

    // Whole subjects are held out when there are several, since voxels of one subject share
    // neighbourhoods and fiber frames and would not reveal overfitting to that subject.
    const std::size_t n_subjects = target.subject_ids.size();
    if (n_subjects >= 2 && target.subject_sizes.size() == n_subjects) {
        std::vector<std::size_t> subjects(n_subjects);
        std::iota(subjects.begin(), subjects.end(), std::size_t{0});
        rng.shuffle(subjects);
        std::vector<char> is_val(n_subjects, 0);
        for (std::size_t i = 0; i < held_out(n_subjects); ++i) is_val[subjects[i]] = 1;
        std::vector<Eigen::Index> tr, val;
        Dataset tr_ids, val_ids;
        Eigen::Index col = 0;
        for (std::size_t s = 0; s < n_subjects; ++s) {
            auto& cols = is_val[s] ? val : tr;
            for (Eigen::Index i = 0; i < target.subject_sizes[s]; ++i) cols.push_back(col + i);
            col += target.subject_sizes[s];
            (is_val[s] ? val_ids : tr_ids).subject_ids.push_back(target.subject_ids[s]);
        }
        Dataset tr_set = target.select(tr), val_set = target.select(val);
        tr_set.subject_ids = std::move(tr_ids.subject_ids);
        val_set.subject_ids = std::move(val_ids.subject_ids);
        return train(model, tr_set, val_set, config);
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(target.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    rng.shuffle(order);
    const std::size_t n_val = held_out(order.size());
    std::vector<Eigen::Index> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<Eigen::Index> tr(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());
    return train(model, target.select(tr), target.select(val), config);
}

Volume<float> predict_volume(const EstimatorModel& model, const Subject& subject, std::span<const int> six_indices) {
    model.validate();
    const Eigen::MatrixXf f = featurize(subject, six_indices);
    const Eigen::MatrixXf pred = forward<float>(model, f, false);
    Volume<float> out(subject.dims, model.output_dim());
    for (std::size_t v = 0; v < subject.dims.voxels(); ++v) {
        if (!subject.wm_mask(v)) continue;
        for (int c = 0; c < model.output_dim(); ++c) out(v, c) = pred(c, static_cast<Eigen::Index>(v));
    }
    return out;
}

template struct Mlp<float>;
template struct Mlp<double>;
template Mlp<float> make_mlp<float>(const std::vector<int>&, double, std::uint64_t);
template Mlp<double> make_mlp<double>(const std::vector<int>&, double, std::uint64_t);
template Mlp<float>::Matrix forward<float>(const Mlp<float>&, const Mlp<float>::Matrix&, bool, Rng*);
template Mlp<double>::Matrix forward<double>(const Mlp<double>&, const Mlp<double>::Matrix&, bool, Rng*);
template double loss_mse<float>(const Mlp<float>::Matrix&, const Mlp<float>::Matrix&);
template double loss_mse<double>(const Mlp<double>::Matrix&, const Mlp<double>::Matrix&);
template Gradients<float> backward<float>(const Mlp<float>&, const Mlp<float>::Matrix&, const Mlp<float>::Matrix&, bool, Rng*);
template Gradients<double> backward<double>(const Mlp<double>&, const Mlp<double>::Matrix&, const Mlp<double>::Matrix&, bool, Rng*);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(Mlp<float>&, const Gradients<float>&, AdamState<float>&, const TrainConfig&);
template void adam_step<double>(Mlp<double>&, const Gradients<double>&, AdamState<double>&, const TrainConfig&);

}  // namespace fodshift
