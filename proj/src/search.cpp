#include "bionas/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <numeric>

namespace bionas {

DartsStepResult darts_step(Supernet& net, const Tensor& train_x, const std::vector<int>& train_y,
                           const Tensor& val_x, const std::vector<int>& val_y,
                           const BilevelConfig& cfg, MomentumState& mom) {
    DartsStepResult out;

    // w <- w - eta_w * grad_w L_train, each branch under its declared rule
    TrainConfig tc;
    tc.lr = cfg.eta_w;
    tc.momentum = cfg.momentum;
    tc.nesterov = cfg.nesterov;
    tc.weight_decay = cfg.weight_decay;
    tc.clip_norm = cfg.clip_norm;
    out.loss_train = train_step(net, train_x, train_y, tc, mom, cfg.eta_w).loss;

    // alpha <- alpha - eta_alpha * grad_alpha L_val, branch outputs treated
    // as functions of the frozen weights
    Context ctx;
    ctx.accumulate_alpha = true;
    ctx.bp_override = true;
    net.alpha().zero_grads();
    LossResult val = model_loss(net, val_x, val_y, ctx);
    if (!std::isfinite(val.loss)) throw NumericError("darts_step: non-finite validation loss");
    out.loss_val = val.loss;
    net.backward(val.output_error, ctx);
    ArchParams& a = net.alpha();
    for (index_t r = 0; r < a.rows(); ++r)
        for (index_t k = 0; k < a.row_size(r); ++k)
            a.logits[static_cast<size_t>(r)][static_cast<size_t>(k)] -=
                cfg.eta_alpha * a.grads[static_cast<size_t>(r)][static_cast<size_t>(k)];
    return out;
}

// ---------------------------------------------------------------------------
// CMA-ES
// ---------------------------------------------------------------------------

CmaEsState CmaEsState::init(index_t dim, int lambda, double sigma0) {
    if (dim < 1) throw ConfigError("CmaEsState: dimension must be positive");
    CmaEsState st;
    st.lambda = lambda > 0 ? lambda : 4 + static_cast<int>(std::floor(3.0 * std::log(dim)));
    if (st.lambda < 2) st.lambda = 2;
    st.mu = st.lambda / 2;
    if (st.mu < 1) st.mu = 1;
    st.mean.assign(static_cast<size_t>(dim), 0.0);
    st.C.assign(static_cast<size_t>(dim), std::vector<double>(static_cast<size_t>(dim), 0.0));
    for (index_t i = 0; i < dim; ++i) st.C[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
    st.sigma = sigma0;
    st.p_c.assign(static_cast<size_t>(dim), 0.0);
    st.p_sigma.assign(static_cast<size_t>(dim), 0.0);
    st.weights.resize(static_cast<size_t>(st.mu));
    double wsum = 0.0;
    for (int i = 0; i < st.mu; ++i) {
        st.weights[static_cast<size_t>(i)] =
            std::log(static_cast<double>(st.mu) + 0.5) - std::log(static_cast<double>(i + 1));
        wsum += st.weights[static_cast<size_t>(i)];
    }
    double w2 = 0.0;
    for (double& w : st.weights) {
        w /= wsum;
        w2 += w * w;
    }
    st.mu_eff = 1.0 / w2;
    const double d = static_cast<double>(dim);
    st.c_c = (4.0 + st.mu_eff / d) / (d + 4.0 + 2.0 * st.mu_eff / d);
    st.c_sigma = (st.mu_eff + 2.0) / (d + st.mu_eff + 5.0);
    st.c1 = 2.0 / ((d + 1.3) * (d + 1.3) + st.mu_eff);
    st.c_mu = std::min(1.0 - st.c1, 2.0 * (st.mu_eff - 2.0 + 1.0 / st.mu_eff) /
                                        ((d + 2.0) * (d + 2.0) + st.mu_eff));
    st.d_sigma =
        1.0 + 2.0 * std::max(0.0, std::sqrt((st.mu_eff - 1.0) / (d + 1.0)) - 1.0) + st.c_sigma;
    st.chi_n = std::sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d));
    return st;
}

namespace {

bool cholesky(const std::vector<std::vector<double>>& C, std::vector<std::vector<double>>& L) {
    const size_t n = C.size();
    L.assign(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double acc = C[i][j];
            for (size_t k = 0; k < j; ++k) acc -= L[i][k] * L[j][k];
            if (i == j) {
                if (acc <= 0.0 || !std::isfinite(acc)) return false;
                L[i][i] = std::sqrt(acc);
            } else {
                L[i][j] = acc / L[j][j];
            }
        }
    }
    return true;
}

}  // namespace

std::vector<std::vector<double>> cholesky_or_repair(std::vector<std::vector<double>>& C) {
    std::vector<std::vector<double>> L;
    if (cholesky(C, L)) return L;
    // repair: nudge the diagonal by 1e-10 * trace / d, then retry once
    const size_t n = C.size();
    double trace = 0.0;
    for (size_t i = 0; i < n; ++i) trace += C[i][i];
    const double bump = 1e-10 * std::max(trace, 1e-30) / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) C[i][i] += bump;
    if (cholesky(C, L)) return L;
    throw NumericError("cmaes: covariance not positive definite after repair");
}

std::vector<std::vector<double>> cmaes_ask(CmaEsState& state, RngStream& rng) {
    const size_t n = state.mean.size();
    std::vector<std::vector<double>> L = cholesky_or_repair(state.C);
    std::vector<std::vector<double>> cands(static_cast<size_t>(state.lambda));
    for (int c = 0; c < state.lambda; ++c) {
        std::vector<double> z(n);
        for (size_t i = 0; i < n; ++i) z[i] = rng.normal();
        std::vector<double>& x = cands[static_cast<size_t>(c)];
        x.assign(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (size_t k = 0; k <= i; ++k) acc += L[i][k] * z[k];
            x[i] = state.mean[i] + state.sigma * acc;
        }
    }
    return cands;
}

void cmaes_update(CmaEsState& state, const std::vector<std::vector<double>>& sorted) {
    const size_t n = state.mean.size();
    if (static_cast<int>(sorted.size()) != state.lambda)
        throw ConfigError("cmaes_update: expected " + std::to_string(state.lambda) +
                          " candidates, got " + std::to_string(sorted.size()));
    for (const auto& c : sorted)
        if (c.size() != n) throw ShapeError("cmaes_update: candidate dimension mismatch");

    const std::vector<double> old_mean = state.mean;
    // m_{t+1} = sum beta_i z_i over the top half
    std::vector<double> new_mean(n, 0.0);
    for (int i = 0; i < state.mu; ++i)
        for (size_t d = 0; d < n; ++d)
            new_mean[d] += state.weights[static_cast<size_t>(i)] * sorted[static_cast<size_t>(i)][d];

    // evolution paths (standard cumulation; the covariance form below keeps
    // the recombination-of-samples shape)
    std::vector<double> delta(n);
    for (size_t d = 0; d < n; ++d) delta[d] = (new_mean[d] - old_mean[d]) / state.sigma;

    // p_sigma needs C^{-1/2} * delta; forward substitution with the Cholesky
    // factor gives an equally distributed whitening transform
    std::vector<std::vector<double>> L = cholesky_or_repair(state.C);
    std::vector<double> white(n);
    for (size_t i = 0; i < n; ++i) {
        double acc = delta[i];
        for (size_t k = 0; k < i; ++k) acc -= L[i][k] * white[k];
        white[i] = acc / L[i][i];
    }
    const double cs = state.c_sigma, cc = state.c_c;
    const double s_norm_coef = std::sqrt(cs * (2.0 - cs) * state.mu_eff);
    const double c_norm_coef = std::sqrt(cc * (2.0 - cc) * state.mu_eff);
    double ps_norm2 = 0.0;
    for (size_t d = 0; d < n; ++d) {
        state.p_sigma[d] = (1.0 - cs) * state.p_sigma[d] + s_norm_coef * white[d];
        ps_norm2 += state.p_sigma[d] * state.p_sigma[d];
    }
    for (size_t d = 0; d < n; ++d)
        state.p_c[d] = (1.0 - cc) * state.p_c[d] + c_norm_coef * delta[d];

    // C_{t+1} = (1 - c1 - cmu) C + c1 p p^T + cmu sum beta_i (z_i - m')(z_i - m')^T
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            double v = (1.0 - state.c1 - state.c_mu) * state.C[i][j] +
                       state.c1 * state.p_c[i] * state.p_c[j];
            for (int k = 0; k < state.mu; ++k)
                v += state.c_mu * state.weights[static_cast<size_t>(k)] *
                     (sorted[static_cast<size_t>(k)][i] - new_mean[i]) *
                     (sorted[static_cast<size_t>(k)][j] - new_mean[j]);
            state.C[i][j] = v;
        }

    // cumulative step-size adaptation, sigma kept in (0,1]
    const double ps_norm = std::sqrt(ps_norm2);
    state.sigma *= std::exp((cs / state.d_sigma) * (ps_norm / state.chi_n - 1.0));
    state.sigma = std::min(state.sigma, 1.0);
    if (!(state.sigma > 0.0) || !std::isfinite(state.sigma))
        throw NumericError("cmaes: step size left (0,1]");
    state.mean = new_mean;
    ++state.iteration;
}

// ---------------------------------------------------------------------------
// Compound fitness
// ---------------------------------------------------------------------------

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

struct CandidateEval {
    double val_loss = 0.0;
    double val_acc = 0.0;
};

CandidateEval eval_alpha(Supernet& net, const std::vector<double>& alpha_flat, const Dataset& val,
                         index_t batch_size) {
    if (val.size() == 0) throw DataError("compound_fitness: empty validation set");
    const std::vector<double> saved = net.alpha().flatten();
    net.alpha().unflatten(alpha_flat);
    EvalResult ev = evaluate(net, val, batch_size);
    net.alpha().unflatten(saved);
    return {ev.loss, ev.top1_acc};
}

double fitness_value(double zeta, double eta_div, double cand_loss, double cand_acc,
                     double incumbent_acc, double l2) {
    return incumbent_acc > cand_acc ? zeta * cand_loss - eta_div * l2
                                    : zeta * cand_loss + eta_div * l2;
}

}  // namespace

double compound_fitness(const std::vector<double>& candidate_alpha,
                        const std::vector<double>& incumbent_alpha, Supernet& net,
                        const Dataset& val, const FitnessConfig& cfg) {
    CandidateEval cand = eval_alpha(net, candidate_alpha, val, cfg.batch_size);
    CandidateEval inc = eval_alpha(net, incumbent_alpha, val, cfg.batch_size);
    const double l2 = cosine_similarity(candidate_alpha, incumbent_alpha);
    return fitness_value(cfg.zeta, cfg.eta_div, cand.val_loss, cand.val_acc, inc.val_acc, l2);
}

// ---------------------------------------------------------------------------
// run_search
// ---------------------------------------------------------------------------

namespace {

Dataset take_batch(const Dataset& ds, index_t start, index_t count) {
    std::vector<index_t> idx;
    for (index_t i = 0; i < count; ++i) idx.push_back((start + i) % ds.size());
    return ds.subset(idx);
}

SearchResult run_darts(Supernet& net, const Dataset& train, const Dataset& val,
                       const SearchConfig& cfg, const std::atomic<bool>* cancel) {
    SearchResult result;
    MomentumState mom;
    BilevelConfig bc = cfg.bilevel;
    bc.seed = cfg.seed;
    const index_t bs = bc.batch_size;
    const index_t steps_per_epoch = std::max<index_t>(1, train.size() / bs);
    for (int epoch = 0; epoch < bc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Dataset tr = train.shuffled(cfg.seed + 1000003ull * static_cast<uint64_t>(epoch));
        Dataset va = val.shuffled(cfg.seed + 2000003ull * static_cast<uint64_t>(epoch));
        double train_loss = 0.0;
        BilevelConfig step_cfg = bc;
        if (epoch < bc.warmup_epochs) step_cfg.eta_alpha = 0.0;
        for (index_t s = 0; s < steps_per_epoch; ++s) {
            if (cancel && cancel->load()) return result;
            Dataset tb = take_batch(tr, s * bs, std::min(bs, tr.size()));
            Dataset vb = take_batch(va, s * bs, std::min(bs, va.size()));
            DartsStepResult r =
                darts_step(net, tb.images, tb.labels, vb.images, vb.labels, step_cfg, mom);
            train_loss += r.loss_train;
        }
        EvalResult ev = evaluate(net, val, bs);
        SearchLogRow row;
        row.epoch = epoch;
        row.engine = "darts";
        row.train_loss = train_loss / static_cast<double>(steps_per_epoch);
        row.val_loss = ev.loss;
        row.val_acc = ev.top1_acc;
        row.alpha_entropy = net.alpha().mean_entropy();
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
    }
    result.genotype = net.derive();
    return result;
}

struct ScoredCandidate {
    double fitness;
    size_t index;
};

SearchResult run_cmaes_single(Supernet& net, const Dataset& train, const Dataset& val,
                              const SearchConfig& cfg, uint64_t stream,
                              const std::atomic<bool>* cancel) {
    SearchResult result;
    MomentumState mom;
    TrainConfig tc;
    tc.lr = cfg.bilevel.eta_w;
    tc.momentum = cfg.bilevel.momentum;
    tc.nesterov = cfg.bilevel.nesterov;
    tc.weight_decay = cfg.bilevel.weight_decay;
    tc.clip_norm = cfg.bilevel.clip_norm;

    std::vector<double> incumbent = net.alpha().flatten();
    CmaEsState es = CmaEsState::init(static_cast<index_t>(incumbent.size()), cfg.lambda, cfg.sigma0);
    es.mean = incumbent;
    RngStream rng(cfg.seed, 0x434d41 + stream);
    const index_t bs = cfg.bilevel.batch_size;
    // the emitted architecture is the best-fitness candidate seen anywhere
    // in the run; the incumbent walk below only steers weight training
    std::vector<double> best_alpha = incumbent;
    double best_fitness = std::numeric_limits<double>::infinity();

    // optional weight warm-up under the incumbent before sampling starts
    for (int e = 0; e < cfg.bilevel.warmup_epochs; ++e) {
        Dataset tr = train.shuffled(cfg.seed + 900001ull * static_cast<uint64_t>(e) + stream);
        for (index_t s = 0; s * bs < tr.size(); ++s) {
            Dataset tb = take_batch(tr, s * bs, std::min(bs, tr.size()));
            train_step(net, tb.images, tb.labels, tc, mom, tc.lr);
        }
    }

    for (int gen = 0; gen < cfg.generations; ++gen) {
        const auto t0 = std::chrono::steady_clock::now();
        if (cancel && cancel->load()) break;
        // shared weights train under the incumbent architecture
        Dataset tr = train.shuffled(cfg.seed + 4000037ull * static_cast<uint64_t>(gen) + stream);
        double train_loss = 0.0;
        for (int s = 0; s < cfg.w_steps_per_gen; ++s) {
            Dataset tb = take_batch(tr, static_cast<index_t>(s) * bs, std::min(bs, tr.size()));
            train_loss += train_step(net, tb.images, tb.labels, tc, mom, tc.lr).loss;
        }
        train_loss /= std::max(1, cfg.w_steps_per_gen);

        CandidateEval inc = eval_alpha(net, incumbent, val, bs);
        std::vector<std::vector<double>> cands = cmaes_ask(es, rng);

        // candidate fitness: optional per-candidate weight warm-up on a
        // clone (stream keyed by generation and index), then val loss
        std::vector<ScoredCandidate> scored(cands.size());
        auto eval_range = [&](Supernet* model, size_t begin, size_t step) {
            for (size_t i = begin; i < cands.size(); i += step) {
                CandidateEval ce;
                if (cfg.fitness.warmup_steps > 0) {
                    auto clone_ptr = model->clone();
                    Supernet& clone = *static_cast<Supernet*>(clone_ptr.get());
                    clone.alpha().unflatten(cands[i]);
                    Dataset wtr = train.shuffled(cfg.seed + 7000003ull * static_cast<uint64_t>(gen) +
                                                 1000003ull * i + stream);
                    MomentumState wmom;
                    for (int s = 0; s < cfg.fitness.warmup_steps; ++s) {
                        Dataset tb =
                            take_batch(wtr, static_cast<index_t>(s) * bs, std::min(bs, wtr.size()));
                        train_step(clone, tb.images, tb.labels, tc, wmom, tc.lr);
                    }
                    EvalResult ev = evaluate(clone, val, bs);
                    ce = {ev.loss, ev.top1_acc};
                } else {
                    ce = eval_alpha(*model, cands[i], val, bs);
                }
                const double l2 = cosine_similarity(cands[i], incumbent);
                scored[i] = {fitness_value(cfg.fitness.zeta, cfg.fitness.eta_div, ce.val_loss,
                                           ce.val_acc, inc.val_acc, l2),
                             i};
            }
        };
        const int threads = std::max(1, cfg.threads);
        if (threads == 1 || cands.size() < 2) {
            eval_range(&net, 0, 1);
        } else {
            // one clone per worker; aggregation below is order-independent
            std::vector<std::unique_ptr<Model>> clones;
            std::vector<std::future<void>> futs;
            for (int w = 1; w < threads; ++w) clones.push_back(net.clone());
            for (int w = 1; w < threads; ++w) {
                Supernet* m = static_cast<Supernet*>(clones[static_cast<size_t>(w - 1)].get());
                futs.push_back(std::async(std::launch::async, eval_range, m,
                                          static_cast<size_t>(w), static_cast<size_t>(threads)));
            }
            eval_range(&net, 0, static_cast<size_t>(threads));
            for (auto& f : futs) f.get();
        }
        std::sort(scored.begin(), scored.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
            if (a.fitness != b.fitness) return a.fitness < b.fitness;
            return a.index < b.index;
        });
        if (scored[0].fitness < best_fitness) {
            best_fitness = scored[0].fitness;
            best_alpha = cands[scored[0].index];
        }
        std::vector<std::vector<double>> sorted;
        for (const ScoredCandidate& sc : scored) sorted.push_back(cands[sc.index]);
        cmaes_update(es, sorted);

        // incumbent moves xi along the normalized direction to the new mean
        double norm = 0.0;
        for (size_t d = 0; d < incumbent.size(); ++d) {
            const double diff = es.mean[d] - incumbent[d];
            norm += diff * diff;
        }
        norm = std::sqrt(norm);
        if (norm > 0)
            for (size_t d = 0; d < incumbent.size(); ++d)
                incumbent[d] += cfg.xi * (es.mean[d] - incumbent[d]) / norm;
        net.alpha().unflatten(incumbent);

        EvalResult ev = evaluate(net, val, bs);
        SearchLogRow row;
        row.epoch = gen;
        row.engine = "cmaes";
        row.train_loss = train_loss;
        row.val_loss = ev.loss;
        row.val_acc = ev.top1_acc;
        row.alpha_entropy = net.alpha().mean_entropy();
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
    }
    net.alpha().unflatten(best_alpha);
    result.genotype = net.derive();
    net.alpha().unflatten(incumbent);
    return result;
}

}  // namespace

SearchResult run_search(Supernet& net, const Dataset& data, const SearchConfig& cfg,
                        const std::atomic<bool>* cancel) {
    if (data.size() < 2) throw DataError("run_search: dataset too small to split");
    Dataset shuffled = data.shuffled(cfg.seed ^ 0x5ee5ull);
    auto [train, val] = shuffled.split_half();
    if (cfg.engine == "darts") return run_darts(net, train, val, cfg, cancel);
    if (cfg.engine != "cmaes") throw ConfigError("run_search: unknown engine '" + cfg.engine + "'");

    if (cfg.restarts <= 1) return run_cmaes_single(net, train, val, cfg, 0, cancel);
    // multi-start: independent sampling streams from the same initial state,
    // best final validation accuracy wins
    SearchResult best;
    double best_acc = -1.0;
    for (int r = 0; r < cfg.restarts; ++r) {
        std::unique_ptr<Model> clone = net.clone();
        SearchResult sr = run_cmaes_single(*static_cast<Supernet*>(clone.get()), train, val, cfg,
                                           static_cast<uint64_t>(r), cancel);
        const double acc = sr.log.empty() ? 0.0 : sr.log.back().val_acc;
        if (acc > best_acc) {
            best_acc = acc;
            best = sr;
        }
    }
    return best;
}

}  // namespace bionas
