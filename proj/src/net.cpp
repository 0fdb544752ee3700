#include "metatsr/net.hpp"

#include <cmath>
#include <cstring>

namespace metatsr {

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void init_uniform(Matrix& m, double bound, RngStream& rng) {
    for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

}  // namespace

void NetConfig::validate() const {
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (lstm_hidden.empty()) throw ConfigError("need at least one lstm layer");
    for (int h : lstm_hidden)
        if (h < 1) throw ConfigError("lstm hidden sizes must be >= 1");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
}

Dense Dense::make(int out_dim, int in_dim, RngStream& rng) {
    Dense d;
    d.W.resize(out_dim, in_dim);
    init_uniform(d.W, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
    d.b = Vector::Zero(out_dim);
    return d;
}

LstmCell LstmCell::make(int input_dim, int hidden_dim, RngStream& rng) {
    LstmCell cell;
    cell.W.resize(4 * hidden_dim, input_dim);
    cell.U.resize(4 * hidden_dim, hidden_dim);
    init_uniform(cell.W, 1.0 / std::sqrt(static_cast<double>(input_dim)), rng);
    init_uniform(cell.U, 1.0 / std::sqrt(static_cast<double>(hidden_dim)), rng);
    cell.b = Vector::Zero(4 * hidden_dim);
    return cell;
}

void LstmCell::Grads::resize_like(const LstmCell& cell) {
    dW = Matrix::Zero(cell.W.rows(), cell.W.cols());
    dU = Matrix::Zero(cell.U.rows(), cell.U.cols());
    db = Vector::Zero(cell.b.size());
}

Matrix LstmCell::forward(const Matrix& x, Cache* cache) const {
    const long T = x.rows();
    const int H = hidden_dim();
    Matrix hs(T, H), cs(T, H);
    Matrix gi(T, H), gf(T, H), gg(T, H), go(T, H);

    Vector h_prev = Vector::Zero(H);
    Vector c_prev = Vector::Zero(H);
    for (long t = 0; t < T; ++t) {
        Vector a = W * x.row(t).transpose() + U * h_prev + b;
        for (int j = 0; j < H; ++j) {
            const double i_g = sigmoid(a(j));
            const double f_g = sigmoid(a(H + j));
            const double g_g = std::tanh(a(2 * H + j));
            const double o_g = sigmoid(a(3 * H + j));
            const double c_v = f_g * c_prev(j) + i_g * g_g;
            gi(t, j) = i_g;
            gf(t, j) = f_g;
            gg(t, j) = g_g;
            go(t, j) = o_g;
            cs(t, j) = c_v;
            hs(t, j) = o_g * std::tanh(c_v);
        }
        h_prev = hs.row(t).transpose();
        c_prev = cs.row(t).transpose();
    }
    if (cache) {
        cache->x = x;
        cache->h = hs;
        cache->c = cs;
        cache->gi = gi;
        cache->gf = gf;
        cache->gg = gg;
        cache->go = go;
    }
    return hs;
}

Matrix LstmCell::backward(const Cache& cache, const Matrix& dh_seq,
                          Grads& g) const {
    const long T = cache.x.rows();
    const int H = hidden_dim();
    Matrix dx(T, input_dim());
    Vector carry_dh = Vector::Zero(H);
    Vector carry_dc = Vector::Zero(H);
    Vector da(4 * H);

    for (long t = T - 1; t >= 0; --t) {
        for (int j = 0; j < H; ++j) {
            const double dh = dh_seq(t, j) + carry_dh(j);
            const double tc = std::tanh(cache.c(t, j));
            const double o_g = cache.go(t, j);
            const double i_g = cache.gi(t, j);
            const double f_g = cache.gf(t, j);
            const double g_g = cache.gg(t, j);
            const double c_prev = t > 0 ? cache.c(t - 1, j) : 0.0;

            const double d_o = dh * tc;
            const double dc = carry_dc(j) + dh * o_g * (1.0 - tc * tc);
            const double d_i = dc * g_g;
            const double d_f = dc * c_prev;
            const double d_g = dc * i_g;

            da(j) = d_i * i_g * (1.0 - i_g);
            da(H + j) = d_f * f_g * (1.0 - f_g);
            da(2 * H + j) = d_g * (1.0 - g_g * g_g);
            da(3 * H + j) = d_o * o_g * (1.0 - o_g);
            carry_dc(j) = dc * f_g;
        }
        g.dW.noalias() += da * cache.x.row(t);
        if (t > 0) g.dU.noalias() += da * cache.h.row(t - 1);
        g.db += da;
        dx.row(t) = (W.transpose() * da).transpose();
        carry_dh = U.transpose() * da;
    }
    return dx;
}

FilmParams FilmParams::identity(int f) {
    return {Vector::Ones(f), Vector::Zero(f)};
}

bool FilmParams::is_identity() const {
    return (gamma.array() == 1.0).all() && (beta.array() == 0.0).all();
}

Vector FilmParams::apply(const Vector& theta) const {
    return gamma.cwiseProduct(theta) + beta;
}

TaskNetwork TaskNetwork::make(const NetConfig& cfg, RngStream& rng) {
    cfg.validate();
    TaskNetwork net;
    net.config = cfg;
    int in = cfg.input_channels;
    for (std::size_t i = 0; i < cfg.lstm_hidden.size(); ++i) {
        auto layer_rng = rng.derive("lstm", i);
        net.cells.push_back(LstmCell::make(in, cfg.lstm_hidden[i], layer_rng));
        in = cfg.lstm_hidden[i];
    }
    auto proj_rng = rng.derive("projection");
    net.projection = Dense::make(cfg.feature_dim, in, proj_rng);
    net.head = Vector::Zero(cfg.feature_dim);
    net.head_bias = 0.0;
    return net;
}

Vector TaskNetwork::features(const Matrix& window, FeatureCache& cache) const {
    if (window.cols() != config.input_channels)
        throw DataError("window channel count mismatch");
    cache.cells.resize(cells.size());
    Matrix seq = window;
    for (std::size_t i = 0; i < cells.size(); ++i)
        seq = cells[i].forward(seq, &cache.cells[i]);
    cache.last_hidden = seq.row(seq.rows() - 1).transpose();
    cache.pre_activation = projection.forward(cache.last_hidden);
    cache.phi = config.tanh_features
                    ? cache.pre_activation.array().tanh().matrix()
                    : cache.pre_activation;
    return cache.phi;
}

Vector TaskNetwork::features(const Matrix& window) const {
    FeatureCache cache;
    return features(window, cache);
}

double TaskNetwork::forward(const Matrix& window,
                            const FilmParams* film) const {
    return forward_with_head(window, head, head_bias, film);
}

double TaskNetwork::forward_with_head(const Matrix& window,
                                      const Vector& theta, double bias,
                                      const FilmParams* film) const {
    const Vector phi = features(window);
    const Vector h = film ? film->apply(theta) : theta;
    return h.dot(phi) + bias;
}

GradientBundle GradientBundle::zeros_like(const TaskNetwork& net) {
    GradientBundle g;
    g.cells.resize(net.cells.size());
    for (std::size_t i = 0; i < net.cells.size(); ++i)
        g.cells[i].resize_like(net.cells[i]);
    g.dproj_W = Matrix::Zero(net.projection.W.rows(), net.projection.W.cols());
    g.dproj_b = Vector::Zero(net.projection.b.size());
    g.dhead = Vector::Zero(net.head.size());
    g.dhead_bias = 0.0;
    g.dgamma = Vector::Zero(net.head.size());
    g.dbeta = Vector::Zero(net.head.size());
    return g;
}

void GradientBundle::add_scaled(const GradientBundle& other, double s) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
        cells[i].dW += s * other.cells[i].dW;
        cells[i].dU += s * other.cells[i].dU;
        cells[i].db += s * other.cells[i].db;
    }
    dproj_W += s * other.dproj_W;
    dproj_b += s * other.dproj_b;
    dhead += s * other.dhead;
    dhead_bias += s * other.dhead_bias;
    dgamma += s * other.dgamma;
    dbeta += s * other.dbeta;
}

void GradientBundle::scale(double s) {
    for (auto& c : cells) {
        c.dW *= s;
        c.dU *= s;
        c.db *= s;
    }
    dproj_W *= s;
    dproj_b *= s;
    dhead *= s;
    dhead_bias *= s;
    dgamma *= s;
    dbeta *= s;
}

bool GradientBundle::all_finite() const {
    for (const auto& c : cells)
        if (!c.dW.allFinite() || !c.dU.allFinite() || !c.db.allFinite())
            return false;
    return dproj_W.allFinite() && dproj_b.allFinite() && dhead.allFinite() &&
           std::isfinite(dhead_bias) && dgamma.allFinite() && dbeta.allFinite();
}

std::vector<ParamRef> parameters(TaskNetwork& net) {
    std::vector<ParamRef> refs;
    for (std::size_t i = 0; i < net.cells.size(); ++i) {
        const std::string p = "lstm" + std::to_string(i);
        auto& c = net.cells[i];
        refs.push_back({p + ".W", c.W.data(), (std::size_t)c.W.size()});
        refs.push_back({p + ".U", c.U.data(), (std::size_t)c.U.size()});
        refs.push_back({p + ".b", c.b.data(), (std::size_t)c.b.size()});
    }
    refs.push_back({"proj.W", net.projection.W.data(),
                    (std::size_t)net.projection.W.size()});
    refs.push_back({"proj.b", net.projection.b.data(),
                    (std::size_t)net.projection.b.size()});
    refs.push_back({"head", net.head.data(), (std::size_t)net.head.size()});
    refs.push_back({"head_bias", &net.head_bias, 1});
    return refs;
}

std::vector<ParamRef> parameters(GradientBundle& g) {
    std::vector<ParamRef> refs;
    for (std::size_t i = 0; i < g.cells.size(); ++i) {
        const std::string p = "lstm" + std::to_string(i);
        auto& c = g.cells[i];
        refs.push_back({p + ".W", c.dW.data(), (std::size_t)c.dW.size()});
        refs.push_back({p + ".U", c.dU.data(), (std::size_t)c.dU.size()});
        refs.push_back({p + ".b", c.db.data(), (std::size_t)c.db.size()});
    }
    refs.push_back({"proj.W", g.dproj_W.data(), (std::size_t)g.dproj_W.size()});
    refs.push_back({"proj.b", g.dproj_b.data(), (std::size_t)g.dproj_b.size()});
    refs.push_back({"head", g.dhead.data(), (std::size_t)g.dhead.size()});
    refs.push_back({"head_bias", &g.dhead_bias, 1});
    return refs;
}

std::uint64_t param_digest(const TaskNetwork& net) {
    auto refs = parameters(const_cast<TaskNetwork&>(net));
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& r : refs) {
        h = fnv1a(r.name, h);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(r.data),
                                   r.size * sizeof(double)),
                  h);
    }
    return h;
}

void features_backward(const TaskNetwork& net,
                       const TaskNetwork::FeatureCache& cache,
                       const Vector& dphi, GradientBundle& g) {
    Vector dpre = dphi;
    if (net.config.tanh_features)
        dpre = dphi.cwiseProduct(
            (1.0 - cache.phi.array().square()).matrix());
    g.dproj_W.noalias() += dpre * cache.last_hidden.transpose();
    g.dproj_b += dpre;
    Vector dh_last = net.projection.W.transpose() * dpre;

    // Only the last step of the top layer receives projection gradient;
    // lower layers receive the full dx sequence from above.
    const long T = cache.cells.back().x.rows();
    Matrix dh_seq = Matrix::Zero(T, net.cells.back().hidden_dim());
    dh_seq.row(T - 1) = dh_last.transpose();
    for (long i = static_cast<long>(net.cells.size()) - 1; i >= 0; --i) {
        Matrix dx = net.cells[i].backward(cache.cells[i], dh_seq, g.cells[i]);
        if (i > 0) dh_seq = dx;
    }
}

double backward(const TaskNetwork& net,
                const std::vector<const LabeledWindow*>& batch, Loss loss,
                const FilmParams* film, GradientBundle& out) {
    if (batch.empty()) throw DataError("empty batch");
    const double n = static_cast<double>(batch.size());
    const Vector eff_head = film ? film->apply(net.head) : net.head;

    double total = 0.0;
    for (const LabeledWindow* w : batch) {
        TaskNetwork::FeatureCache cache;
        const Vector phi = net.features(w->inputs, cache);
        const double pred = eff_head.dot(phi) + net.head_bias;
        const double resid = w->label - pred;

        double dpred;  // d(mean loss)/d(pred)
        if (loss == Loss::mae) {
            total += std::abs(resid);
            dpred = -sign0(resid) / n;
        } else {
            total += resid * resid;
            dpred = -2.0 * resid / n;
        }

        out.dhead += dpred * (film ? film->gamma.cwiseProduct(phi) : phi);
        out.dhead_bias += dpred;
        if (film) {
            out.dgamma += dpred * net.head.cwiseProduct(phi);
            out.dbeta += dpred * phi;
        }
        features_backward(net, cache, dpred * eff_head, out);
    }
    return total / n;
}

HeadGradient head_gradient(const TaskNetwork& net, const MetaWindow& mw,
                           Loss loss, const FilmParams* film) {
    if (mw.windows.empty()) throw DataError("empty meta-window");
    HeadGradient g;
    g.dtheta = Vector::Zero(net.feature_dim());
    const Vector eff_head = film ? film->apply(net.head) : net.head;
    for (const auto& w : mw.windows) {
        const Vector phi = net.features(w.inputs);
        const double pred = eff_head.dot(phi) + net.head_bias;
        const double resid = w.label - pred;
        const double err = loss == Loss::mae ? sign0(resid) : 2.0 * resid;
        const Vector phi_eff = film ? film->gamma.cwiseProduct(phi) : phi;
        g.dtheta -= err * phi_eff;
        g.dbias -= err;
    }
    return g;
}

namespace {

double batch_loss(const TaskNetwork& net,
                  const std::vector<const LabeledWindow*>& batch, Loss loss,
                  const FilmParams* film) {
    double total = 0.0;
    for (const LabeledWindow* w : batch) {
        const double pred = net.forward(w->inputs, film);
        const double r = w->label - pred;
        total += loss == Loss::mae ? std::abs(r) : r * r;
    }
    return total / static_cast<double>(batch.size());
}

}  // namespace

GradCheckReport gradient_check(const TaskNetwork& net, double tolerance,
                               RngStream& rng) {
    GradCheckReport report;
    const double h = 1e-5;
    TaskNetwork work = net;

    // Batch with labels pushed away from the predictions so the MAE
    // subgradient cannot flip sign under the probe step.
    std::vector<LabeledWindow> storage;
    const int delta = 4;
    for (int i = 0; i < 3; ++i) {
        LabeledWindow w;
        w.inputs.resize(delta, net.config.input_channels);
        for (int t = 0; t < delta; ++t)
            for (int c = 0; c < net.config.input_channels; ++c)
                w.inputs(t, c) = rng.gaussian(0.0, 1.0);
        w.label = rng.gaussian(0.0, 1.0);
        const double pred = work.forward(w.inputs);
        if (std::abs(w.label - pred) < 0.05)
            w.label += w.label >= pred ? 0.1 : -0.1;
        storage.push_back(std::move(w));
    }
    std::vector<const LabeledWindow*> batch;
    for (const auto& w : storage) batch.push_back(&w);

    FilmParams film;
    film.gamma = Vector::Ones(net.feature_dim());
    film.beta = Vector::Zero(net.feature_dim());
    for (int i = 0; i < net.feature_dim(); ++i) {
        film.gamma(i) += 0.3 * rng.gaussian(0.0, 1.0);
        film.beta(i) = 0.2 * rng.gaussian(0.0, 1.0);
    }

    for (Loss loss : {Loss::mae, Loss::mse}) {
        for (const FilmParams* f : {(const FilmParams*)nullptr, &film}) {
            GradientBundle g = GradientBundle::zeros_like(work);
            backward(work, batch, loss, f, g);

            auto params = parameters(work);
            auto grads = parameters(g);
            for (std::size_t p = 0; p < params.size(); ++p) {
                for (std::size_t i = 0; i < params[p].size; ++i) {
                    double* v = params[p].data + i;
                    const double saved = *v;
                    *v = saved + h;
                    const double up = batch_loss(work, batch, loss, f);
                    *v = saved - h;
                    const double down = batch_loss(work, batch, loss, f);
                    *v = saved;
                    const double fd = (up - down) / (2.0 * h);
                    const double an = grads[p].data[i];
                    const double denom =
                        std::max({std::abs(fd), std::abs(an), 1e-4});
                    const double rel = std::abs(fd - an) / denom;
                    if (rel > report.max_rel_error) {
                        report.max_rel_error = rel;
                        report.worst_param =
                            params[p].name + "[" + std::to_string(i) + "]";
                    }
                }
            }
            // FiLM gradients when modulated.
            if (f) {
                FilmParams probe = film;
                auto film_check = [&](Vector& vec, const Vector& analytic,
                                      const std::string& label) {
                    for (long i = 0; i < vec.size(); ++i) {
                        const double saved = vec(i);
                        vec(i) = saved + h;
                        const double up = batch_loss(work, batch, loss, &probe);
                        vec(i) = saved - h;
                        const double down =
                            batch_loss(work, batch, loss, &probe);
                        vec(i) = saved;
                        const double fd = (up - down) / (2.0 * h);
                        const double an = analytic(i);
                        const double denom =
                            std::max({std::abs(fd), std::abs(an), 1e-4});
                        const double rel = std::abs(fd - an) / denom;
                        if (rel > report.max_rel_error) {
                            report.max_rel_error = rel;
                            report.worst_param =
                                label + "[" + std::to_string(i) + "]";
                        }
                    }
                };
                film_check(probe.gamma, g.dgamma, "gamma");
                film_check(probe.beta, g.dbeta, "beta");
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

}  // namespace metatsr
