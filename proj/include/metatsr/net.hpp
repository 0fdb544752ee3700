#pragma once

#include "metatsr/common.hpp"
#include "metatsr/series.hpp"

#include <string>
#include <vector>

namespace metatsr {

enum class Loss { mae, mse };

/// Task-network architecture: a stack of recurrent cells over the window's
/// time steps, a dense projection of the last hidden state to the feature
/// space, and a linear head over the features.
struct NetConfig {
    int input_channels = 1;
    std::vector<int> lstm_hidden = {120, 120};
    int feature_dim = 128;  // F: head and FiLM dimensionality
    bool tanh_features = true;

    void validate() const;
};

/// Dense affine layer y = W x + b.
struct Dense {
    Matrix W;
    Vector b;

    static Dense make(int out_dim, int in_dim, RngStream& rng);
    Vector forward(const Vector& x) const { return W * x + b; }
};

/// Single LSTM layer unrolled over a sequence. Gate rows are packed
/// [input; forget; cell; output], each block of size hidden_dim.
class LstmCell {
public:
    LstmCell() = default;
    static LstmCell make(int input_dim, int hidden_dim, RngStream& rng);

    int input_dim() const { return static_cast<int>(W.cols()); }
    int hidden_dim() const { return static_cast<int>(U.cols()); }

    /// Per-sequence activations kept for backprop through time.
    struct Cache {
        Matrix x;  // T x input_dim
        Matrix h;  // T x H
        Matrix c;  // T x H
        Matrix gi, gf, gg, go;  // gate activations, T x H each
    };

    struct Grads {
        Matrix dW, dU;
        Vector db;
        void resize_like(const LstmCell& cell);
    };

    /// Runs the cell over x (T x input_dim) from zero initial state; returns
    /// the hidden sequence (T x H) and fills the cache.
    Matrix forward(const Matrix& x, Cache* cache) const;

    /// BPTT. dh_seq is the upstream gradient per step (T x H); accumulates
    /// parameter gradients into g and returns dx (T x input_dim).
    Matrix backward(const Cache& cache, const Matrix& dh_seq, Grads& g) const;

    Matrix W;  // 4H x input_dim
    Matrix U;  // 4H x H
    Vector b;  // 4H
};

/// FiLM parameters for the head: gamma (scale) and beta (shift), length F.
struct FilmParams {
    Vector gamma;
    Vector beta;

    static FilmParams identity(int f);
    bool is_identity() const;
    /// FiLM(theta | rho) = gamma .* theta + beta.
    Vector apply(const Vector& theta) const;
};

/// Feature extractor (recurrent stack + projection) plus linear head.
/// The head is the only part adapted in the inner loop; the extractor
/// produces phi(x).
struct TaskNetwork {
    NetConfig config;
    std::vector<LstmCell> cells;
    Dense projection;  // last hidden -> F
    Vector head;       // theta (F), zero-initialized
    double head_bias = 0.0;

    static TaskNetwork make(const NetConfig& cfg, RngStream& rng);

    int feature_dim() const { return config.feature_dim; }

    struct FeatureCache {
        std::vector<LstmCell::Cache> cells;
        Vector last_hidden;
        Vector pre_activation;
        Vector phi;
    };

    /// phi(x) for one window (window_size x C rows).
    Vector features(const Matrix& window) const;
    Vector features(const Matrix& window, FeatureCache& cache) const;

    /// FiLM(theta|rho)^T phi(x) + bias; identity modulation when film is null.
    double forward(const Matrix& window, const FilmParams* film = nullptr) const;
    /// Same with an explicit head (used after fast adaptation).
    double forward_with_head(const Matrix& window, const Vector& theta,
                             double bias, const FilmParams* film) const;
};

/// Gradients mirroring TaskNetwork parameters one-to-one, plus the gradients
/// w.r.t. the FiLM inputs (owned by the modulation network, when present).
struct GradientBundle {
    std::vector<LstmCell::Grads> cells;
    Matrix dproj_W;
    Vector dproj_b;
    Vector dhead;
    double dhead_bias = 0.0;
    Vector dgamma;
    Vector dbeta;

    static GradientBundle zeros_like(const TaskNetwork& net);
    void add_scaled(const GradientBundle& other, double scale);
    void scale(double s);
    bool all_finite() const;
};

/// Named view over every parameter tensor; the order is the serialization
/// order and matches GradientBundle's parameter order.
struct ParamRef {
    std::string name;
    double* data;
    std::size_t size;
};
std::vector<ParamRef> parameters(TaskNetwork& net);
std::vector<ParamRef> parameters(GradientBundle& g);  // excludes dgamma/dbeta

/// FNV digest over all parameter bytes; used for restore-hygiene checks.
std::uint64_t param_digest(const TaskNetwork& net);

/// Applies phi-path gradients: given dL/dphi for a cached window, accumulates
/// extractor gradients (projection + BPTT) into g.
void features_backward(const TaskNetwork& net,
                       const TaskNetwork::FeatureCache& cache,
                       const Vector& dphi, GradientBundle& g);

/// Mean batch loss plus analytic gradients of every parameter (extractor,
/// head, and FiLM gamma/beta when film is given). MAE uses sign with
/// sign(0) = 0; MSE is the mean of squared residuals.
double backward(const TaskNetwork& net,
                const std::vector<const LabeledWindow*>& batch, Loss loss,
                const FilmParams* film, GradientBundle& out);

struct HeadGradient {
    Vector dtheta;
    double dbias = 0.0;
};

/// Gradient of the UNNORMALIZED sum loss restricted to the head:
/// MAE: -sum_i sign(y_i - pred_i) * phi_eff(x_i), phi_eff = gamma .* phi;
/// MSE: -2 sum_i (y_i - pred_i) * phi_eff(x_i). backward()'s head gradient
/// equals this divided by the batch size.
HeadGradient head_gradient(const TaskNetwork& net, const MetaWindow& mw,
                           Loss loss, const FilmParams* film);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    bool pass = false;
};

/// Central-difference verification of backward() over every parameter, for
/// both losses, with and without FiLM. Keeps residuals away from zero so the
/// MAE subgradient is stable under the probe step.
GradCheckReport gradient_check(const TaskNetwork& net, double tolerance,
                               RngStream& rng);

}  // namespace metatsr
