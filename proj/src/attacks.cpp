#include "bionas/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace bionas {

Tensor Predictor::predict(const Tensor& x) const {
    Context ctx;  // eval, no grads
    return model_.forward(x, ctx);
}

void assert_linf_budget(const Tensor& x, const Tensor& adv, double eps, const char* attack) {
    constexpr double kTol = 1e-9;
    for (index_t i = 0; i < x.numel(); ++i)
        if (std::fabs(adv[i] - x[i]) > eps + kTol)
            throw NumericError(std::string(attack) + ": L-inf budget violated");
}

void assert_l0_budget(const Tensor& x, const Tensor& adv, index_t max_pixels, const char* attack) {
    const index_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (index_t i = 0; i < n; ++i) {
        index_t changed = 0;
        for (index_t p = 0; p < hw; ++p) {
            bool diff = false;
            for (index_t ch = 0; ch < c; ++ch)
                diff |= x[(i * c + ch) * hw + p] != adv[(i * c + ch) * hw + p];
            changed += diff;
        }
        if (changed > max_pixels) throw NumericError(std::string(attack) + ": L0 budget violated");
    }
}

void assert_unit_range(const Tensor& adv, const char* attack) {
    for (index_t i = 0; i < adv.numel(); ++i)
        if (adv[i] < 0.0 || adv[i] > 1.0)
            throw NumericError(std::string(attack) + ": output left [0,1]");
}

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::vector<int> target_labels(const std::vector<int>& y, index_t classes) {
    std::vector<int> t(y.size());
    for (size_t i = 0; i < y.size(); ++i) t[i] = (y[i] + 1) % static_cast<int>(classes);
    return t;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const index_t n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(n));
    for (index_t i = 0; i < n; ++i) {
        index_t best = 0;
        for (index_t j = 1; j < c; ++j)
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        out[static_cast<size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

/// Per-sample cross-entropy values (no reduction).
std::vector<double> per_sample_xent(const Tensor& logits, const std::vector<int>& y) {
    const index_t n = logits.dim(0), c = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(n));
    for (index_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * c;
        double m = row[0];
        for (index_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (index_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
        out[static_cast<size_t>(i)] = std::log(z) + m - row[y[static_cast<size_t>(i)]];
    }
    return out;
}

}  // namespace

Tensor fgsm(Model& model, const Tensor& x, const std::vector<int>& y, double eps) {
    if (eps < 0) throw ConfigError("fgsm: negative epsilon");
    Tensor g = input_gradient(model, x, y);
    if (!g.all_finite()) throw NumericError("fgsm: non-finite input gradient");
    Tensor adv(x.shape());
    for (index_t i = 0; i < x.numel(); ++i) {
        const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
        adv[i] = clamp01(x[i] + eps * s);
    }
    assert_linf_budget(x, adv, eps, "fgsm");
    assert_unit_range(adv, "fgsm");
    return adv;
}

Tensor pgd(Model& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
           RngStream& rng) {
    if (cfg.steps < 1) throw ConfigError("pgd: steps must be >= 1");
    const double eps = cfg.epsilon;
    const std::vector<int> tgt =
        cfg.targeted ? target_labels(y, model.num_classes()) : std::vector<int>();
    Tensor adv(x.shape());
    for (index_t i = 0; i < x.numel(); ++i)
        adv[i] = clamp01(x[i] + (cfg.random_start ? rng.uniform(-eps, eps) : 0.0));
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor g = input_gradient(model, adv, cfg.targeted ? tgt : y);
        for (index_t i = 0; i < x.numel(); ++i) {
            const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
            // ascend the true-label loss, or descend toward the target
            double v = adv[i] + (cfg.targeted ? -1.0 : 1.0) * cfg.alpha_step * s;
            v = std::clamp(v, x[i] - eps, x[i] + eps);
            adv[i] = clamp01(v);
        }
        assert_linf_budget(x, adv, eps, "pgd");
        assert_unit_range(adv, "pgd");
    }
    return adv;
}

Tensor apgd(Model& model, const Tensor& x, const std::vector<int>& y, double eps, int steps,
            int restarts, RngStream& rng) {
    if (steps < 2) throw ConfigError("apgd: steps must be >= 2");
    if (eps == 0.0) return x;
    const index_t n = x.dim(0);
    const index_t stride = x.numel() / n;

    // checkpoint schedule: p0=0, p1=0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)
    std::vector<int> ckpts;
    {
        double pj_1 = 0.0, pj = 0.22;
        ckpts.push_back(0);
        ckpts.push_back(static_cast<int>(std::ceil(0.22 * steps)));
        while (ckpts.back() < steps) {
            const double pn = pj + std::max(pj - pj_1 - 0.03, 0.06);
            pj_1 = pj;
            pj = pn;
            ckpts.push_back(static_cast<int>(std::ceil(pn * steps)));
        }
    }

    Tensor best_adv = x;
    std::vector<double> best_loss_global(static_cast<size_t>(n),
                                         -std::numeric_limits<double>::infinity());
    for (int r = 0; r < std::max(1, restarts); ++r) {
        Tensor adv(x.shape());
        for (index_t i = 0; i < x.numel(); ++i) adv[i] = clamp01(x[i] + rng.uniform(-eps, eps));
        Tensor prev = adv;
        std::vector<double> step_size(static_cast<size_t>(n), 2.0 * eps);
        std::vector<double> f_cur = per_sample_xent(Predictor(model).predict(adv), y);
        std::vector<double> best_loss = f_cur;
        Tensor best = adv;
        std::vector<int> improved(static_cast<size_t>(n), 0);
        std::vector<double> best_at_ckpt = best_loss;
        std::vector<double> step_at_ckpt = step_size;
        size_t next_ckpt = 1;

        for (int k = 0; k < steps; ++k) {
            Tensor g = input_gradient(model, adv, y);
            Tensor znext(adv.shape());
            for (index_t i = 0; i < n; ++i)
                for (index_t j = 0; j < stride; ++j) {
                    const index_t p = i * stride + j;
                    const double s = g[p] > 0 ? 1.0 : (g[p] < 0 ? -1.0 : 0.0);
                    double v = adv[p] + step_size[static_cast<size_t>(i)] * s;
                    znext[p] = clamp01(std::clamp(v, x[p] - eps, x[p] + eps));
                }
            constexpr double a = 0.75;  // momentum mixing
            Tensor xnext(adv.shape());
            for (index_t i = 0; i < x.numel(); ++i) {
                double v = adv[i] + a * (znext[i] - adv[i]) + (1.0 - a) * (adv[i] - prev[i]);
                xnext[i] = clamp01(std::clamp(v, x[i] - eps, x[i] + eps));
            }
            prev = adv;
            adv = xnext;
            assert_linf_budget(x, adv, eps, "apgd");
            assert_unit_range(adv, "apgd");

            std::vector<double> f_new = per_sample_xent(Predictor(model).predict(adv), y);
            for (index_t i = 0; i < n; ++i) {
                const size_t si = static_cast<size_t>(i);
                if (f_new[si] > f_cur[si]) ++improved[si];
                if (f_new[si] > best_loss[si]) {
                    best_loss[si] = f_new[si];
                    for (index_t j = 0; j < stride; ++j)
                        best[i * stride + j] = adv[i * stride + j];
                }
            }
            f_cur = f_new;

            if (next_ckpt < ckpts.size() && k + 1 == ckpts[next_ckpt]) {
                const int window = ckpts[next_ckpt] - ckpts[next_ckpt - 1];
                for (index_t i = 0; i < n; ++i) {
                    const size_t si = static_cast<size_t>(i);
                    const bool low_progress =
                        improved[si] < static_cast<int>(std::ceil(0.75 * window));
                    const bool stalled = step_at_ckpt[si] == step_size[si] &&
                                         best_at_ckpt[si] == best_loss[si];
                    if (low_progress || stalled) {
                        step_size[si] /= 2.0;
                        for (index_t j = 0; j < stride; ++j)
                            adv[i * stride + j] = best[i * stride + j];
                    }
                    improved[si] = 0;
                    best_at_ckpt[si] = best_loss[si];
                    step_at_ckpt[si] = step_size[si];
                }
                f_cur = per_sample_xent(Predictor(model).predict(adv), y);
                ++next_ckpt;
            }
        }
        for (index_t i = 0; i < n; ++i) {
            const size_t si = static_cast<size_t>(i);
            if (best_loss[si] > best_loss_global[si]) {
                best_loss_global[si] = best_loss[si];
                for (index_t j = 0; j < stride; ++j)
                    best_adv[i * stride + j] = best[i * stride + j];
            }
        }
    }
    assert_linf_budget(x, best_adv, eps, "apgd");
    return best_adv;
}

// ---------------------------------------------------------------------------
// One-pixel attack (differential evolution)
// ---------------------------------------------------------------------------

namespace {

struct PixelGenome {
    std::vector<double> v;  // k x (row, col, r, g, b), continuous
};

Tensor apply_pixels(const Tensor& image, const PixelGenome& genome, index_t k) {
    Tensor out = image;
    const index_t c = image.dim(1), h = image.dim(2), w = image.dim(3);
    for (index_t p = 0; p < k; ++p) {
        const double* g = genome.v.data() + p * 5;
        const index_t row = std::clamp<index_t>(static_cast<index_t>(std::lround(g[0])), 0, h - 1);
        const index_t col = std::clamp<index_t>(static_cast<index_t>(std::lround(g[1])), 0, w - 1);
        for (index_t ch = 0; ch < std::min<index_t>(c, 3); ++ch)
            out[(ch * h + row) * w + col] = clamp01(g[2 + ch]);
    }
    return out;
}

double pixel_fitness(const Predictor& model, const Tensor& image, const PixelGenome& genome,
                     index_t k, int label) {
    Tensor probe = apply_pixels(image, genome, k);
    Tensor logits = model.predict(probe);
    const index_t c = logits.dim(1);
    double m = logits[0];
    for (index_t j = 1; j < c; ++j) m = std::max(m, logits[j]);
    double z = 0.0;
    for (index_t j = 0; j < c; ++j) z += std::exp(logits[j] - m);
    return std::exp(logits[label] - m) / z;  // true-class confidence, minimized
}

}  // namespace

Tensor one_pixel(const Predictor& model, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg, RngStream& rng) {
    const index_t k = cfg.pixels;
    if (k < 1) throw ConfigError("one_pixel: k must be >= 1");
    const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h * w < k) throw ConfigError("one_pixel: image smaller than k pixels");
    const int pop = std::max(4, cfg.de_population);
    constexpr double kF = 0.5, kCR = 0.9;

    Tensor adv = x;
    for (index_t img = 0; img < n; ++img) {
        Tensor image({1, c, h, w});
        std::copy(x.data() + img * c * h * w, x.data() + (img + 1) * c * h * w, image.data());
        const int label = y[static_cast<size_t>(img)];
        RngStream r = rng.derive(static_cast<uint64_t>(img));

        std::vector<PixelGenome> population(static_cast<size_t>(pop));
        std::vector<double> fitness(static_cast<size_t>(pop));
        for (int i = 0; i < pop; ++i) {
            PixelGenome& g = population[static_cast<size_t>(i)];
            g.v.resize(static_cast<size_t>(k * 5));
            for (index_t p = 0; p < k; ++p) {
                g.v[p * 5 + 0] = static_cast<double>(r.uniform_int(static_cast<uint64_t>(h)));
                g.v[p * 5 + 1] = static_cast<double>(r.uniform_int(static_cast<uint64_t>(w)));
                for (int ch = 0; ch < 3; ++ch) g.v[p * 5 + 2 + ch] = r.uniform();
            }
            fitness[static_cast<size_t>(i)] = pixel_fitness(model, image, g, k, label);
        }
        for (int step = 0; step < cfg.de_steps; ++step) {
            for (int i = 0; i < pop; ++i) {
                // DE/rand/1/bin
                int a, b, cidx;
                do { a = static_cast<int>(r.uniform_int(pop)); } while (a == i);
                do { b = static_cast<int>(r.uniform_int(pop)); } while (b == i || b == a);
                do { cidx = static_cast<int>(r.uniform_int(pop)); } while (cidx == i || cidx == a || cidx == b);
                PixelGenome trial = population[static_cast<size_t>(i)];
                const size_t dims = trial.v.size();
                const size_t jrand = r.uniform_int(dims);
                for (size_t d = 0; d < dims; ++d) {
                    if (r.uniform() < kCR || d == jrand)
                        trial.v[d] = population[static_cast<size_t>(a)].v[d] +
                                     kF * (population[static_cast<size_t>(b)].v[d] -
                                           population[static_cast<size_t>(cidx)].v[d]);
                }
                const double f = pixel_fitness(model, image, trial, k, label);
                if (f <= fitness[static_cast<size_t>(i)]) {
                    population[static_cast<size_t>(i)] = std::move(trial);
                    fitness[static_cast<size_t>(i)] = f;
                }
            }
        }
        size_t best = 0;
        for (size_t i = 1; i < fitness.size(); ++i)
            if (fitness[i] < fitness[best]) best = i;
        Tensor attacked = apply_pixels(image, population[best], k);
        assert_l0_budget(image, attacked, k, "one_pixel");
        assert_unit_range(attacked, "one_pixel");
        std::copy(attacked.data(), attacked.data() + attacked.numel(),
                  adv.data() + img * c * h * w);
    }
    return adv;
}

// ---------------------------------------------------------------------------
// Square attack
// ---------------------------------------------------------------------------

namespace {

double margin_loss(const Predictor& model, const Tensor& image, int label) {
    Tensor logits = model.predict(image);
    const index_t c = logits.dim(1);
    double other = -std::numeric_limits<double>::infinity();
    for (index_t j = 0; j < c; ++j)
        if (j != label) other = std::max(other, logits[j]);
    return logits[label] - other;  // < 0 means misclassified
}

double square_p_schedule(double p0, int query, int total) {
    // standard fraction table, scaled to the query budget
    const double frac = static_cast<double>(query) / static_cast<double>(total);
    if (frac < 0.001) return p0;
    if (frac < 0.005) return p0 / 2;
    if (frac < 0.02) return p0 / 4;
    if (frac < 0.1) return p0 / 8;
    if (frac < 0.2) return p0 / 16;
    if (frac < 0.4) return p0 / 32;
    if (frac < 0.6) return p0 / 64;
    if (frac < 0.8) return p0 / 128;
    return p0 / 256;
}

}  // namespace

Tensor square_attack(const Predictor& model, const Tensor& x, const std::vector<int>& y,
                     double eps, int queries, RngStream& rng) {
    if (queries < 1) throw ConfigError("square_attack: queries must be >= 1");
    const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    constexpr double kP0 = 0.05;
    Tensor adv = x;
    for (index_t img = 0; img < n; ++img) {
        Tensor clean({1, c, h, w});
        std::copy(x.data() + img * c * h * w, x.data() + (img + 1) * c * h * w, clean.data());
        const int label = y[static_cast<size_t>(img)];
        RngStream r = rng.derive(static_cast<uint64_t>(img));

        // init: vertical stripes of +-eps per channel and column
        Tensor cur = clean;
        for (index_t ch = 0; ch < c; ++ch)
            for (index_t col = 0; col < w; ++col) {
                const double s = r.uniform() < 0.5 ? -eps : eps;
                for (index_t row = 0; row < h; ++row) {
                    const index_t p = (ch * h + row) * w + col;
                    cur[p] = clamp01(clean[p] + s);
                }
            }
        double f_cur = margin_loss(model, cur, label);
        assert_linf_budget(clean, cur, eps, "square");

        for (int q = 0; q < queries && f_cur >= 0; ++q) {
            const double p = square_p_schedule(kP0, q, queries);
            const index_t side = std::clamp<index_t>(
                static_cast<index_t>(std::ceil(0.8 * std::sqrt(static_cast<double>(h * w) * p))), 1,
                std::min(h, w));
            const index_t row0 = static_cast<index_t>(r.uniform_int(static_cast<uint64_t>(h - side + 1)));
            const index_t col0 = static_cast<index_t>(r.uniform_int(static_cast<uint64_t>(w - side + 1)));
            Tensor cand = cur;
            for (index_t ch = 0; ch < c; ++ch) {
                const double s = r.uniform() < 0.5 ? -eps : eps;
                for (index_t dy = 0; dy < side; ++dy)
                    for (index_t dx = 0; dx < side; ++dx) {
                        const index_t pidx = (ch * h + row0 + dy) * w + (col0 + dx);
                        cand[pidx] = clamp01(clean[pidx] + s);
                    }
            }
            assert_linf_budget(clean, cand, eps, "square");
            assert_unit_range(cand, "square");
            const double f_new = margin_loss(model, cand, label);
            if (f_new < f_cur) {  // accept only strict margin decrease
                cur = std::move(cand);
                f_cur = f_new;
            }
        }
        std::copy(cur.data(), cur.data() + cur.numel(), adv.data() + img * c * h * w);
    }
    return adv;
}

double transfer_attack(Model& surrogate, const Predictor& target, const Tensor& x,
                       const std::vector<int>& y, double eps) {
    Tensor adv = fgsm(surrogate, x, y, eps);
    const std::vector<int> pred = argmax_rows(target.predict(adv));
    index_t correct = 0;
    for (size_t i = 0; i < y.size(); ++i)
        if (pred[i] == y[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

AttackResult run_attack(Model& model, const Dataset& ds, const AttackConfig& cfg,
                        Model* surrogate) {
    if (ds.size() == 0) throw DataError("run_attack: empty dataset");
    const Tensor& x = ds.images;
    const std::vector<int>& y = ds.labels;
    RngStream rng(cfg.seed, 0x41544b);
    Predictor pred(model);

    AttackResult res;
    if (cfg.kind == "fgsm") {
        res.adversarial = fgsm(model, x, y, cfg.epsilon);
    } else if (cfg.kind == "pgd") {
        res.adversarial = pgd(model, x, y, cfg, rng);
    } else if (cfg.kind == "tpgd") {
        AttackConfig t = cfg;
        t.targeted = true;
        res.adversarial = pgd(model, x, y, t, rng);
    } else if (cfg.kind == "apgd") {
        res.adversarial = apgd(model, x, y, cfg.epsilon, cfg.steps, cfg.restarts, rng);
    } else if (cfg.kind == "one_pixel") {
        res.adversarial = one_pixel(pred, x, y, cfg, rng);
    } else if (cfg.kind == "square") {
        res.adversarial = square_attack(pred, x, y, cfg.epsilon, cfg.queries, rng);
    } else if (cfg.kind == "transfer") {
        if (!surrogate) throw ConfigError("run_attack: transfer requires a surrogate model");
        res.adversarial = fgsm(*surrogate, x, y, cfg.epsilon);
    } else {
        throw ConfigError("run_attack: unknown attack '" + cfg.kind + "'");
    }

    const std::vector<int> clean_pred = argmax_rows(pred.predict(x));
    const std::vector<int> adv_pred = argmax_rows(pred.predict(res.adversarial));
    index_t clean_ok = 0, adv_ok = 0;
    res.flipped.resize(y.size());
    for (size_t i = 0; i < y.size(); ++i) {
        clean_ok += clean_pred[i] == y[i];
        adv_ok += adv_pred[i] == y[i];
        res.flipped[i] = clean_pred[i] != adv_pred[i];
    }
    res.clean_acc = static_cast<double>(clean_ok) / static_cast<double>(y.size());
    res.robust_acc = static_cast<double>(adv_ok) / static_cast<double>(y.size());
    return res;
}

}  // namespace bionas
