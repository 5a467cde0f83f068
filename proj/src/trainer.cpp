#include "bionas/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace bionas {

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw ConfigError("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0," +
                          std::to_string(cfg.epochs) + ")");
    const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
    constexpr double kPi = 3.141592653589793238462643383279502884;
    switch (cfg.schedule) {
        case LrSchedule::cosine:
            return cfg.lr * (1.0 + std::cos(kPi * t)) / 2.0;
        case LrSchedule::linear:
            return cfg.lr * (1.0 - t);
    }
    return cfg.lr;
}

Tensor cutout(const Tensor& image, index_t length, RngStream& rng) {
    if (length < 0) throw ConfigError("cutout: negative length");
    if (length == 0) return image;
    if (image.rank() != 3) throw ShapeError("cutout: expected [C,H,W], got " + image.shape_str());
    const index_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const index_t cy = static_cast<index_t>(rng.uniform_int(static_cast<uint64_t>(h)));
    const index_t cx = static_cast<index_t>(rng.uniform_int(static_cast<uint64_t>(w)));
    const index_t y0 = std::max<index_t>(0, cy - length / 2);
    const index_t y1 = std::min(h, cy + (length + 1) / 2);
    const index_t x0 = std::max<index_t>(0, cx - length / 2);
    const index_t x1 = std::min(w, cx + (length + 1) / 2);
    Tensor out = image;
    for (index_t ch = 0; ch < c; ++ch)
        for (index_t y = y0; y < y1; ++y)
            for (index_t x = x0; x < x1; ++x) out[(ch * h + y) * w + x] = 0.0;
    return out;
}

Tensor drop_path(const Tensor& branch_output, double p, RngStream& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("drop_path: p must be in [0,1)");
    if (!training || p == 0.0) return branch_output;
    Tensor out = branch_output;
    const index_t n = out.dim(0);
    const index_t stride = out.numel() / n;
    const double keep_scale = 1.0 / (1.0 - p);
    for (index_t i = 0; i < n; ++i) {
        double* row = out.data() + i * stride;
        if (rng.uniform() < p)
            for (index_t j = 0; j < stride; ++j) row[j] = 0.0;
        else
            for (index_t j = 0; j < stride; ++j) row[j] *= keep_scale;
    }
    return out;
}

namespace {

double global_grad_norm(const std::vector<Param*>& params) {
    double acc = 0.0;
    for (const Param* p : params) {
        if (p->plastic) continue;
        for (index_t i = 0; i < p->grad.numel(); ++i) acc += p->grad[i] * p->grad[i];
    }
    return std::sqrt(acc);
}

}  // namespace

StepResult train_step(Model& model, const Tensor& x, const std::vector<int>& labels,
                      const TrainConfig& cfg, MomentumState& mom, double lr_now,
                      GradObserver* observer, RngStream* drop_rng,
                      std::vector<RuleTraceEvent>* trace) {
    Context ctx;
    ctx.training = true;
    ctx.accumulate_grads = true;
    ctx.drop_path_prob = cfg.drop_path_prob;
    ctx.drop_rng = drop_rng;
    ctx.rule_trace = trace;

    model.zero_grads();
    LossResult res = model_loss(model, x, labels, ctx, cfg.label_smoothing);
    if (!std::isfinite(res.loss)) throw NumericError("train_step: non-finite loss");
    model.backward(res.output_error, ctx);

    StepResult step;
    step.loss = res.loss;
    const index_t nb = res.logits.dim(0), nc = res.logits.dim(1);
    for (index_t i = 0; i < nb; ++i) {
        index_t best = 0;
        for (index_t j = 1; j < nc; ++j)
            if (res.logits[i * nc + j] > res.logits[i * nc + best]) best = j;
        if (static_cast<int>(best) == labels[static_cast<size_t>(i)]) ++step.correct;
    }

    std::vector<Param*> params = model.params();
    if (cfg.clip_norm > 0) {
        const double norm = global_grad_norm(params);
        if (norm > cfg.clip_norm) {
            const double f = cfg.clip_norm / norm;
            for (Param* p : params)
                if (!p->plastic) scale_inplace(p->grad, f);
        }
    }
    if (observer) observer->on_batch(params);

    if (lr_now > 0) {
        for (Param* p : params) {
            if (p->plastic) continue;
            Tensor& v = mom.v.try_emplace(p->name, Tensor::zeros(p->value.shape())).first->second;
            // v <- momentum*v + g + wd*w ; w <- w - lr*(g + momentum*v) (nesterov)
            //                              w <- w - lr*v                (classic)
            for (index_t i = 0; i < v.numel(); ++i) {
                const double g = p->grad[i] + cfg.weight_decay * p->value[i];
                v[i] = cfg.momentum * v[i] + g;
                p->value[i] -= cfg.nesterov ? lr_now * (g + cfg.momentum * v[i]) : lr_now * v[i];
            }
            p->value.seal("sgd_update");
        }
    }
    return step;
}

EvalResult evaluate(Model& model, const Dataset& ds, index_t batch_size) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    Context ctx;  // eval mode
    EvalResult r;
    index_t correct = 0;
    double loss_acc = 0.0;
    for (index_t start = 0; start < ds.size(); start += batch_size) {
        std::vector<index_t> idx;
        for (index_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        Dataset b = ds.subset(idx);
        LossResult res = model_loss(model, b.images, b.labels, ctx);
        loss_acc += res.loss * static_cast<double>(b.size());
        const index_t c = res.logits.dim(1);
        for (index_t i = 0; i < b.size(); ++i) {
            index_t best = 0;
            for (index_t j = 1; j < c; ++j)
                if (res.logits[i * c + j] > res.logits[i * c + best]) best = j;
            if (static_cast<int>(best) == b.labels[static_cast<size_t>(i)]) ++correct;
        }
    }
    r.top1_acc = static_cast<double>(correct) / static_cast<double>(ds.size());
    r.loss = loss_acc / static_cast<double>(ds.size());
    return r;
}

std::vector<EpochLog> train_model(Model& model, const Dataset& train, const Dataset& val,
                                  const TrainConfig& cfg, MomentumState& mom, int start_epoch,
                                  GradObserver* observer, const std::atomic<bool>* cancel,
                                  std::function<void(const EpochLog&)> on_epoch) {
    if (train.size() == 0) throw DataError("train_model: empty training set");
    std::vector<EpochLog> logs;
    RngStream root(cfg.seed, 0x54524e52);
    const index_t n = train.size();
    const index_t c = train.images.dim(1), h = train.images.dim(2), w = train.images.dim(3);

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr_now = lr_at_epoch(cfg, epoch);
        // all stochastic choices derive from (seed, epoch): resume-exact
        RngStream order_rng = root.derive(static_cast<uint64_t>(epoch)).derive(1);
        RngStream aug_rng = root.derive(static_cast<uint64_t>(epoch)).derive(2);
        RngStream drop_rng = root.derive(static_cast<uint64_t>(epoch)).derive(3);

        std::vector<index_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(i))]);

        double loss_acc = 0.0;
        index_t seen = 0, correct = 0;
        for (index_t start = 0; start < n; start += cfg.batch_size) {
            if (cancel && cancel->load()) return logs;
            std::vector<index_t> idx(order.begin() + start,
                                     order.begin() + std::min(n, start + cfg.batch_size));
            Dataset b = train.subset(idx);
            // augmentation: flip, padded crop, cutout
            if (cfg.random_flip || cfg.random_crop || cfg.cutout_length > 0) {
                for (index_t i = 0; i < b.size(); ++i) {
                    Tensor img = b.image(i).reshape({c, h, w});
                    if (cfg.random_flip && aug_rng.uniform() < 0.5) {
                        Tensor flipped(img.shape());
                        for (index_t ch = 0; ch < c; ++ch)
                            for (index_t y = 0; y < h; ++y)
                                for (index_t x = 0; x < w; ++x)
                                    flipped[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
                        img = flipped;
                    }
                    if (cfg.random_crop) {
                        const index_t pad = cfg.crop_padding;
                        const index_t oy = static_cast<index_t>(aug_rng.uniform_int(2 * pad + 1));
                        const index_t ox = static_cast<index_t>(aug_rng.uniform_int(2 * pad + 1));
                        Tensor cropped(img.shape());
                        for (index_t ch = 0; ch < c; ++ch)
                            for (index_t y = 0; y < h; ++y)
                                for (index_t x = 0; x < w; ++x) {
                                    const index_t sy = y + oy - pad, sx = x + ox - pad;
                                    cropped[(ch * h + y) * w + x] =
                                        (sy < 0 || sy >= h || sx < 0 || sx >= w)
                                            ? 0.0
                                            : img[(ch * h + sy) * w + sx];
                                }
                        img = cropped;
                    }
                    if (cfg.cutout_length > 0) img = cutout(img, cfg.cutout_length, aug_rng);
                    std::copy(img.data(), img.data() + img.numel(),
                              b.images.data() + i * c * h * w);
                }
            }
            const StepResult step =
                train_step(model, b.images, b.labels, cfg, mom, lr_now, observer, &drop_rng, nullptr);
            loss_acc += step.loss * static_cast<double>(b.size());
            correct += step.correct;
            seen += b.size();
        }
        if (observer) observer->on_epoch_end(epoch);

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr_now;
        log.train_loss = loss_acc / static_cast<double>(seen);
        log.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        if (val.size() > 0) {
            EvalResult ev = evaluate(model, val, cfg.batch_size);
            log.val_loss = ev.loss;
            log.val_acc = ev.top1_acc;
        }
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        logs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return logs;
}

}  // namespace bionas
