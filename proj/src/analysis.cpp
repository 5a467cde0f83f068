#include "bionas/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace bionas {

void GradVarianceTracker::on_batch(const std::vector<Param*>& params) {
    index_t total = 0;
    for (const Param* p : params)
        if (!p->plastic) total += p->grad.numel();
    if (mean_.empty()) {
        mean_.assign(static_cast<size_t>(total), 0.0);
        m2_.assign(static_cast<size_t>(total), 0.0);
    } else if (static_cast<index_t>(mean_.size()) != total) {
        throw ShapeError("GradVarianceTracker: parameter count changed mid-epoch");
    }
    ++batches_;
    size_t off = 0;
    for (const Param* p : params) {
        if (p->plastic) continue;
        for (index_t i = 0; i < p->grad.numel(); ++i, ++off) {
            // Welford update per parameter element
            const double x = p->grad[i];
            const double d = x - mean_[off];
            mean_[off] += d / static_cast<double>(batches_);
            m2_[off] += d * (x - mean_[off]);
        }
    }
}

double GradVarianceTracker::current_variance() const {
    if (batches_ < 2 || mean_.empty()) return 0.0;
    double acc = 0.0;
    for (double v : m2_) acc += v / static_cast<double>(batches_ - 1);
    return acc / static_cast<double>(mean_.size());
}

void GradVarianceTracker::on_epoch_end(int epoch) {
    epochs_.push_back({epoch, current_variance()});
    mean_.clear();
    m2_.clear();
    batches_ = 0;
}

void GradVarianceTracker::reset() {
    mean_.clear();
    m2_.clear();
    batches_ = 0;
    epochs_.clear();
}

namespace {

double normal_cdf(double x, double sigma) {
    return 0.5 * (1.0 + std::erf(x / (sigma * std::sqrt(2.0))));
}

double student_t_pdf(double x, double df) {
    const double c =
        std::tgamma((df + 1.0) / 2.0) / (std::sqrt(df * 3.141592653589793) * std::tgamma(df / 2.0));
    return c * std::pow(1.0 + x * x / df, -(df + 1.0) / 2.0);
}

/// Simpson integration of the scaled t(10) density over [a,b].
double student_t_mass(double a, double b, double scale) {
    constexpr int kSteps = 32;  // even
    const double h = (b - a) / kSteps;
    double acc = 0.0;
    for (int i = 0; i <= kSteps; ++i) {
        const double x = a + h * i;
        const double f = student_t_pdf(x / scale, 10.0) / scale;
        acc += f * ((i == 0 || i == kSteps) ? 1.0 : (i % 2 ? 4.0 : 2.0));
    }
    return acc * h / 3.0;
}

}  // namespace

WeightStats weight_distribution(Model& model, int bins) {
    std::vector<double> pooled;
    for (Param* p : model.params()) {
        if (p->name.size() < 2 || p->name.substr(p->name.size() - 2) != ".W") continue;
        pooled.insert(pooled.end(), p->value.vec().begin(), p->value.vec().end());
    }
    if (pooled.empty()) throw DataError("weight_distribution: model has no conv/dense weights");

    WeightStats ws;
    ws.count = static_cast<int64_t>(pooled.size());
    double m1 = 0.0;
    for (double v : pooled) m1 += v;
    m1 /= static_cast<double>(pooled.size());
    double m2 = 0.0, m4 = 0.0;
    for (double v : pooled) {
        const double d = v - m1;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= static_cast<double>(pooled.size());
    m4 /= static_cast<double>(pooled.size());
    ws.variance = m2 * static_cast<double>(pooled.size()) / std::max<double>(1.0, static_cast<double>(pooled.size() - 1));
    ws.excess_kurtosis = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;

    const double lo = -2.0, hi = 2.0;
    const double width = (hi - lo) / bins;
    ws.bin_left.resize(static_cast<size_t>(bins));
    ws.bin_right.resize(static_cast<size_t>(bins));
    ws.mass.assign(static_cast<size_t>(bins), 0.0);
    for (int b = 0; b < bins; ++b) {
        ws.bin_left[static_cast<size_t>(b)] = lo + b * width;
        ws.bin_right[static_cast<size_t>(b)] = lo + (b + 1) * width;
    }
    int64_t clipped = 0;
    for (double v : pooled) {
        if (v < lo || v >= hi) {
            ++clipped;
            continue;
        }
        const int b = std::min(bins - 1, static_cast<int>((v - lo) / width));
        ws.mass[static_cast<size_t>(b)] += 1.0;
    }
    for (double& m : ws.mass) m /= static_cast<double>(pooled.size());
    ws.clipped_tail_mass = static_cast<double>(clipped) / static_cast<double>(pooled.size());

    const double sigma = std::sqrt(std::max(ws.variance, 1e-300));
    const double t_scale = sigma / std::sqrt(10.0 / 8.0);  // t(10) variance is df/(df-2)
    for (int b = 0; b < bins; ++b) {
        const double a = ws.bin_left[static_cast<size_t>(b)], r = ws.bin_right[static_cast<size_t>(b)];
        const double g_mass = normal_cdf(r, sigma) - normal_cdf(a, sigma);
        ws.dev_gaussian += std::fabs(ws.mass[static_cast<size_t>(b)] - g_mass);
        ws.dev_student_t += std::fabs(ws.mass[static_cast<size_t>(b)] - student_t_mass(a, r, t_scale));
    }
    return ws;
}

namespace {

std::vector<Rule> rule_choices(OpKind op, const SearchSpaceConfig& space) {
    std::vector<Rule> rules = admissible_rules(op, space);
    rules.erase(std::remove(rules.begin(), rules.end(), Rule::none), rules.end());
    return rules;
}

bool admits(OpKind op, Rule r, const SearchSpaceConfig& space) {
    const std::vector<Rule> rules = rule_choices(op, space);
    return std::find(rules.begin(), rules.end(), r) != rules.end();
}

}  // namespace

Genotype reassign_rules(const Genotype& g, RngStream& rng, ReassignMode mode,
                        const SearchSpaceConfig& space) {
    Genotype out = g;
    std::vector<GenotypeEntry*> slots;
    for (auto* list : {&out.normal, &out.reduce})
        for (GenotypeEntry& e : *list)
            if (e.rule != Rule::none) slots.push_back(&e);
    if (slots.empty()) return out;

    if (mode == ReassignMode::resample) {
        for (GenotypeEntry* e : slots) {
            const std::vector<Rule> rules = rule_choices(e->op, space);
            if (rules.empty())
                throw ConfigError("reassign_rules: op '" + op_token(e->op) +
                                  "' has no admissible rules");
            e->rule = rules[rng.uniform_int(rules.size())];
        }
        return out;
    }

    // shuffle: permute the existing rule multiset, rejecting permutations
    // that would put a rule on an op that does not admit it
    std::vector<Rule> pool;
    for (GenotypeEntry* e : slots) pool.push_back(e->rule);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::vector<Rule> perm = pool;
        for (size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform_int(i))]);
        bool ok = true;
        for (size_t i = 0; i < slots.size() && ok; ++i) ok = admits(slots[i]->op, perm[i], space);
        if (ok) {
            for (size_t i = 0; i < slots.size(); ++i) slots[i]->rule = perm[i];
            return out;
        }
    }
    throw ConfigError("reassign_rules: no admissible shuffle found");
}

Genotype with_uniform_rule(const Genotype& g, Rule rule) {
    Genotype out = g;
    for (auto* list : {&out.normal, &out.reduce})
        for (GenotypeEntry& e : *list)
            if (e.rule != Rule::none) e.rule = rule;
    return out;
}

bool same_topology(const Genotype& a, const Genotype& b) {
    auto eq = [](const std::vector<GenotypeEntry>& x, const std::vector<GenotypeEntry>& y) {
        if (x.size() != y.size()) return false;
        for (size_t i = 0; i < x.size(); ++i)
            if (x[i].src != y[i].src || x[i].op != y[i].op) return false;
        return true;
    };
    return eq(a.normal, b.normal) && eq(a.reduce, b.reduce);
}

}  // namespace bionas
