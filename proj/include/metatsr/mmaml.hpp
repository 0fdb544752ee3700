#pragma once

#include "metatsr/maml.hpp"

#include <map>

namespace metatsr {

struct ModNetConfig {
    int summary_dim = 2;  // C+1
    int enc_hidden = 128;
    int dec_hidden = 128;
    int latent_dim = 64;  // Z
    int film_dim = 128;   // F; generator emits 2F

    void validate() const;
};

/// Variational encoder, decoder, and FiLM-parameter generator. The encoder
/// reads the meta-window summary row by row; the decoder unrolls for l steps
/// with z as the input at every step (no teacher forcing). The generator is
/// zero-initialized so training starts at identity modulation.
struct ModulationNetwork {
    ModNetConfig config;
    LstmCell encoder;
    Dense mu_head;
    Dense logvar_head;
    LstmCell decoder;
    Dense dec_out;
    Dense generator;  // latent -> 2F

    static ModulationNetwork make(const ModNetConfig& cfg, RngStream& rng);
};

std::vector<ParamRef> parameters(ModulationNetwork& mod);
std::uint64_t param_digest(const ModulationNetwork& mod);

struct ModGrads {
    LstmCell::Grads enc;
    Matrix dmu_W, dlogvar_W, ddec_out_W, dgen_W;
    Vector dmu_b, dlogvar_b, ddec_out_b, dgen_b;
    LstmCell::Grads dec;

    static ModGrads zeros_like(const ModulationNetwork& mod);
    void add_scaled(const ModGrads& other, double s);
    void scale(double s);
    bool all_finite() const;
};
std::vector<ParamRef> parameters(ModGrads& g);

struct Encoding {
    Vector mu;
    Vector logvar;
    Vector z;
    Vector eta;  // the N(0,I) draw; zero when deterministic
    bool stochastic = false;
};

/// z = mu + sigma .* eta (reparameterized) when stochastic, else z = mu.
Encoding encode(const ModulationNetwork& mod, const MetaWindowSummary& summary,
                bool stochastic, RngStream* rng);

/// Splits the generator output into (gamma_raw, beta); gamma = 1 + gamma_raw.
FilmParams modulate(const ModulationNetwork& mod, const Vector& z);

/// Unrolls the decoder for l steps and maps each hidden state to a summary row.
Matrix decode(const ModulationNetwork& mod, const Vector& z, int l);

/// KL[N(mu, diag sigma^2) || N(0, I)] = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1).
double kl_divergence(const Vector& mu, const Vector& logvar);

/// Mean squared reconstruction over all summary entries plus the KL term.
double vae_loss(const MetaWindowSummary& summary, const Matrix& reconstruction,
                const Vector& mu, const Vector& logvar);

struct MmamlConfig : MamlConfig {
    double vrae_weight = 0.1;  // lambda
    int latent_dim = 64;
    bool stochastic_encode = true;

    void validate() const;
};

/// Query MAE + lambda * VAE loss for one task, with gradients for the full
/// parameter set (task network and modulation network) accumulated into the
/// two bundles. `eta` supplies the reparameterization draw (common random
/// numbers for gradient verification); pass null for deterministic z = mu.
struct MmamlTaskTerms {
    double query_mae = 0.0;
    double vae = 0.0;
    double total = 0.0;
};
MmamlTaskTerms mmaml_task_backward(const TaskNetwork& net,
                                   const ModulationNetwork& mod,
                                   const MetaWindow& support,
                                   const MetaWindow& query,
                                   const MmamlConfig& cfg, const Vector* eta,
                                   GradientBundle& net_out, ModGrads& mod_out);

/// Inference/evaluation path: deterministic encode, modulate, adapt, score.
double mmaml_query_mae(const TaskNetwork& net, const ModulationNetwork& mod,
                       const MetaWindow& support, const MetaWindow& query,
                       const MmamlConfig& cfg);

struct MmamlTrainResult {
    TaskNetwork net;
    ModulationNetwork mod;
    TaskNetwork final_net;
    ModulationNetwork final_mod;
    std::vector<TrainLogRow> log;
    std::vector<double> recon_mse_log;  // epoch-averaged reconstruction MSE
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
};

struct MmamlTrainHooks {
    int checkpoint_every = 0;
    std::function<void(int epoch, const TaskNetwork&, const ModulationNetwork&)>
        on_checkpoint;
};

/// Alg.-3-style joint meta-training of the task and modulation networks:
/// summarize, encode, modulate, adapt the modulated head, score the query
/// with the same rho, decode for reconstruction; one outer update of all
/// parameters against query MAE + lambda * VAE loss.
MmamlTrainResult mmaml_meta_train(const std::vector<VirtualTask>& tasks,
                                  TaskNetwork net, ModulationNetwork mod,
                                  const MmamlConfig& cfg,
                                  const std::vector<VirtualTask>& validation,
                                  RngStream rng, int threads = 1,
                                  const MmamlTrainHooks* hooks = nullptr,
                                  const MetaTrainState* resume = nullptr);

struct MmamlPrediction {
    std::vector<std::vector<double>> predictions;  // one list per query
    std::vector<double> mae_per_query;
    FilmParams film;
    AdaptedHead head;
};

/// Deterministic inference: z = mu, modulate, adapt on the support with
/// cfg.inner_steps, then predict every window of every query meta-window.
/// The decoder is not used.
MmamlPrediction mmaml_adapt_and_predict(
    const TaskNetwork& net, const ModulationNetwork& mod,
    const MetaWindow& support, const std::vector<const MetaWindow*>& queries,
    const MmamlConfig& cfg);

struct SplitDistances {
    double train_test = 0.0;
    double train_val = 0.0;
    double test_val = 0.0;
};

/// Euclidean distances between per-split mean latent vectors.
SplitDistances split_similarity(
    const std::map<Split, std::vector<Vector>>& embeddings_by_split);

}  // namespace metatsr
