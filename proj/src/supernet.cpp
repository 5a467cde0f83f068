#include "bionas/supernet.hpp"

#include <algorithm>
#include <cmath>

namespace bionas {

std::string op_token(OpKind op) {
    switch (op) {
        case OpKind::sep_conv_3x3: return "sep_conv_3x3";
        case OpKind::sep_conv_5x5: return "sep_conv_5x5";
        case OpKind::dil_conv_3x3: return "dil_conv_3x3";
        case OpKind::dil_conv_5x5: return "dil_conv_5x5";
        case OpKind::max_pool_3x3: return "max_pool_3x3";
        case OpKind::avg_pool_3x3: return "avg_pool_3x3";
        case OpKind::skip_connect: return "skip_connect";
        case OpKind::zero: return "zero";
    }
    return "zero";
}

OpKind op_from_token(const std::string& tok) {
    for (OpKind op : {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
                      OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
                      OpKind::skip_connect, OpKind::zero})
        if (op_token(op) == tok) return op;
    throw ConfigError("unknown op token '" + tok + "'");
}

namespace {

bool is_conv_op(OpKind op) {
    return op == OpKind::sep_conv_3x3 || op == OpKind::sep_conv_5x5 ||
           op == OpKind::dil_conv_3x3 || op == OpKind::dil_conv_5x5;
}

const std::vector<Rule> kFeedbackQuartet{Rule::fa, Rule::usf, Rule::brsf, Rule::frsf};
const std::vector<Rule> kSkipRules{Rule::usf, Rule::brsf, Rule::frsf};

}  // namespace

std::vector<Rule> admissible_rules(OpKind op, const SearchSpaceConfig& cfg) {
    if (!cfg.custom_pairs.empty()) {
        std::vector<Rule> rules;
        for (const CandidatePair& p : cfg.custom_pairs)
            if (p.op == op) rules.push_back(p.rule);
        return rules;
    }
    if (cfg.mode == SpaceMode::paper32) return kFeedbackQuartet;
    if (is_conv_op(op)) {
        std::vector<Rule> rules = kFeedbackQuartet;
        if (cfg.extended_rules) {
            rules.push_back(Rule::hebb);
            rules.push_back(Rule::pc);
        }
        return rules;
    }
    if (op == OpKind::skip_connect) return kSkipRules;
    return {Rule::none};
}

std::vector<CandidatePair> candidate_pairs(const SearchSpaceConfig& cfg) {
    if (!cfg.custom_pairs.empty()) return cfg.custom_pairs;
    std::vector<CandidatePair> pairs;
    const std::vector<OpKind> ops{OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
                                  OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
                                  OpKind::skip_connect, OpKind::zero};
    for (OpKind op : ops)
        for (Rule r : admissible_rules(op, cfg)) pairs.push_back({op, r});
    return pairs;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    std::vector<double> out(logits.size());
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

index_t edges_per_cell(int nodes) {
    return static_cast<index_t>(nodes) * (static_cast<index_t>(nodes) + 3) / 2;
}

std::vector<double> ArchParams::flatten() const {
    std::vector<double> flat;
    for (const auto& row : logits) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
}

void ArchParams::unflatten(const std::vector<double>& flat) {
    size_t pos = 0;
    for (auto& row : logits) {
        if (pos + row.size() > flat.size()) throw ShapeError("ArchParams::unflatten: too few values");
        std::copy(flat.begin() + static_cast<long>(pos),
                  flat.begin() + static_cast<long>(pos + row.size()), row.begin());
        pos += row.size();
    }
    if (pos != flat.size()) throw ShapeError("ArchParams::unflatten: too many values");
}

void ArchParams::zero_grads() {
    grads.assign(logits.size(), {});
    for (size_t r = 0; r < logits.size(); ++r) grads[r].assign(logits[r].size(), 0.0);
}

double ArchParams::mean_entropy() const {
    double acc = 0.0;
    for (const auto& row : logits) {
        const std::vector<double> p = softmax(row);
        double h = 0.0;
        for (double v : p)
            if (v > 0) h -= v * std::log(v);
        acc += h;
    }
    return logits.empty() ? 0.0 : acc / static_cast<double>(logits.size());
}

// ---------------------------------------------------------------------------
// Pair modules
// ---------------------------------------------------------------------------

namespace {

ModulePtr conv_pair_module(const std::string& name, OpKind op, Rule rule, index_t c,
                           index_t stride, const SearchSpaceConfig& space, RngStream rng) {
    const index_t k = (op == OpKind::sep_conv_3x3 || op == OpKind::dil_conv_3x3) ? 3 : 5;
    const index_t dil = (op == OpKind::dil_conv_3x3 || op == OpKind::dil_conv_5x5) ? 2 : 1;
    const index_t pad = dil * (k - 1) / 2;
    std::vector<ModulePtr> stages;
    stages.push_back(std::make_unique<ReluModule>());
    if (rule == Rule::hebb) {
        Conv2dSpec sp{stride, pad, dil, 1};
        stages.push_back(std::make_unique<HebbianConvModule>(name + ".hebb", c, c, k, sp,
                                                             space.hebbian_scale,
                                                             space.hebbian_normalize, rng));
    } else if (rule == Rule::pc) {
        Conv2dSpec sp{stride, pad, dil, 1};
        stages.push_back(std::make_unique<PcConvModule>(name + ".pc", c, c, k, sp, space.pc_steps,
                                                        space.pc_gating, rng));
    } else {
        if (!is_backward_rule(rule) || rule == Rule::dfa)
            throw ConfigError("op '" + op_token(op) + "' cannot carry rule '" + rule_token(rule) +
                              "'");
        // depthwise k x k followed by a pointwise 1x1, both under the rule
        Conv2dSpec dw{stride, pad, dil, c};
        stages.push_back(std::make_unique<Conv2dModule>(name + ".dw", c, c, k, dw, rule, rng));
        Conv2dSpec pw{1, 0, 1, 1};
        stages.push_back(
            std::make_unique<Conv2dModule>(name + ".pw", c, c, 1, pw, rule, rng.derive(7)));
    }
    return std::make_unique<SequentialModule>(std::move(stages));
}

}  // namespace

ModulePtr build_pair_module(const std::string& name, const CandidatePair& pair, index_t channels,
                            index_t stride, const SearchSpaceConfig& space, RngStream rng) {
    switch (pair.op) {
        case OpKind::sep_conv_3x3:
        case OpKind::sep_conv_5x5:
        case OpKind::dil_conv_3x3:
        case OpKind::dil_conv_5x5:
            return conv_pair_module(name, pair.op, pair.rule, channels, stride, space, rng);
        case OpKind::max_pool_3x3:
            return std::make_unique<PoolModule>(PoolKind::max, stride);
        case OpKind::avg_pool_3x3:
            return std::make_unique<PoolModule>(PoolKind::avg, stride);
        case OpKind::skip_connect:
            if (stride == 1) return std::make_unique<IdentityModule>();
            if (!is_backward_rule(pair.rule) || pair.rule == Rule::dfa)
                throw ConfigError("strided skip_connect cannot carry rule '" +
                                  rule_token(pair.rule) + "'");
            {
                Conv2dSpec sp{stride, 0, 1, 1};
                return std::make_unique<Conv2dModule>(name + ".skip", channels, channels, 1, sp,
                                                      pair.rule, rng);
            }
        case OpKind::zero:
            return std::make_unique<ZeroModule>(stride);
    }
    throw ConfigError("build_pair_module: unknown op");
}

// ---------------------------------------------------------------------------
// MixedEdge
// ---------------------------------------------------------------------------

MixedEdge::MixedEdge(std::string name, const std::vector<CandidatePair>& pairs, index_t channels,
                     index_t stride, const SearchSpaceConfig& space, RngStream rng)
    : name_(std::move(name)), pairs_(pairs) {
    for (size_t k = 0; k < pairs_.size(); ++k)
        branches_.push_back(build_pair_module(name_ + ".b" + std::to_string(k), pairs_[k],
                                              channels, stride, space, rng.derive(k)));
    branch_out_.resize(pairs_.size());
}

Tensor MixedEdge::forward(const Tensor& x, Context& ctx) {
    if (!logits_) throw ConfigError("MixedEdge: alpha row not bound");
    weights_ = softmax(*logits_);
    Tensor out;
    for (size_t k = 0; k < branches_.size(); ++k) {
        branch_out_[k] = branches_[k]->forward(x, ctx);
        if (out.empty())
            out = scale(branch_out_[k], weights_[k]);
        else
            add_inplace(out, branch_out_[k], weights_[k]);
    }
    return out.seal("mixed_edge");
}

Tensor MixedEdge::backward(const Tensor& grad_out, Context& ctx) {
    if (ctx.accumulate_alpha && alpha_grads_) {
        // d loss / d alpha_k = s_k (<g, b_k> - sum_m s_m <g, b_m>)
        std::vector<double> d(branches_.size());
        double mean = 0.0;
        for (size_t k = 0; k < branches_.size(); ++k) {
            d[k] = dot(grad_out, branch_out_[k]);
            mean += weights_[k] * d[k];
        }
        for (size_t k = 0; k < branches_.size(); ++k)
            (*alpha_grads_)[k] += weights_[k] * (d[k] - mean);
    }
    Tensor gin;
    for (size_t k = 0; k < branches_.size(); ++k) {
        Tensor g = branches_[k]->backward(scale(grad_out, weights_[k]), ctx);
        if (gin.empty())
            gin = std::move(g);
        else
            add_inplace(gin, g);
    }
    return gin;
}

void MixedEdge::collect_params(std::vector<Param*>& out) {
    for (auto& b : branches_) b->collect_params(out);
}

void MixedEdge::save_state(StateTensors& t, StateCounters& c) {
    for (auto& b : branches_) b->save_state(t, c);
}

void MixedEdge::load_state(const StateTensors& t, const StateCounters& c) {
    for (auto& b : branches_) b->load_state(t, c);
}

// ---------------------------------------------------------------------------
// Supernet
// ---------------------------------------------------------------------------

namespace {

ModulePtr make_preprocess(const std::string& name, index_t c_in, index_t c_out, bool reduce,
                          Rule rule, RngStream rng) {
    if (!reduce && c_in == c_out) return std::make_unique<IdentityModule>();
    Conv2dSpec sp{reduce ? 2 : 1, 0, 1, 1};
    return std::make_unique<Conv2dModule>(name, c_in, c_out, 1, sp, rule, rng);
}

// conv + relu; the activation stands in for the BN the reference cells use
ModulePtr make_stem(index_t c_in, index_t c_out, Rule rule, RngStream rng) {
    Conv2dSpec sp{1, 1, 1, 1};
    std::vector<ModulePtr> stages;
    stages.push_back(std::make_unique<Conv2dModule>("stem", c_in, c_out, 3, sp, rule, rng));
    stages.push_back(std::make_unique<ReluModule>());
    return std::make_unique<SequentialModule>(std::move(stages));
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    const index_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    index_t c_total = 0;
    for (const Tensor& p : parts) c_total += p.dim(1);
    Tensor out({n, c_total, h, w});
    index_t c_off = 0;
    for (const Tensor& p : parts) {
        const index_t c = p.dim(1), hw = h * w;
        for (index_t i = 0; i < n; ++i)
            std::copy(p.data() + i * c * hw, p.data() + (i + 1) * c * hw,
                      out.data() + (i * c_total + c_off) * hw);
        c_off += c;
    }
    return out;
}

std::vector<Tensor> split_channels(const Tensor& g, const std::vector<Shape>& shapes) {
    std::vector<Tensor> parts;
    const index_t n = g.dim(0), c_total = g.dim(1), hw = g.dim(2) * g.dim(3);
    index_t c_off = 0;
    for (const Shape& s : shapes) {
        Tensor p(s);
        const index_t c = s[1];
        for (index_t i = 0; i < n; ++i)
            std::copy(g.data() + (i * c_total + c_off) * hw, g.data() + (i * c_total + c_off + c) * hw,
                      p.data() + i * c * hw);
        c_off += c;
        parts.push_back(std::move(p));
    }
    return parts;
}

void accumulate(Tensor& acc, const Tensor& t) {
    if (acc.empty())
        acc = t;
    else
        add_inplace(acc, t);
}

}  // namespace

Supernet::Supernet(SupernetConfig cfg) : cfg_(std::move(cfg)) {
    pairs_ = candidate_pairs(cfg_.space);
    const index_t e_cell = edges_per_cell(cfg_.nodes);
    alpha_.normal_rows = e_cell;
    alpha_.logits.assign(static_cast<size_t>(2 * e_cell),
                         std::vector<double>(pairs_.size(), 0.0));
    alpha_.zero_grads();

    RngStream root(cfg_.seed, 0x535550);
    uint64_t mod_id = 0;
    norm_ = std::make_unique<NormalizeModule>(cfg_.norm_mean, cfg_.norm_std);
    const index_t c_stem = cfg_.init_channels * cfg_.stem_multiplier;
    stem_ = make_stem(cfg_.input_channels, c_stem, cfg_.stem_rule, root.derive(mod_id++));

    index_t c_pp = c_stem, c_p = c_stem, c_curr = cfg_.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < cfg_.cells; ++i) {
        const bool reduction = cfg_.cells > 1 && (i == cfg_.cells / 3 || i == 2 * cfg_.cells / 3);
        if (reduction) c_curr *= 2;
        CellGraph cell;
        cell.reduction = reduction;
        const std::string cname = "c" + std::to_string(i);
        cell.prep0 = make_preprocess(cname + ".p0", c_pp, c_curr, reduction_prev, cfg_.stem_rule,
                                     root.derive(mod_id++));
        cell.prep1 = make_preprocess(cname + ".p1", c_p, c_curr, false, cfg_.stem_rule,
                                     root.derive(mod_id++));
        index_t edge_id = 0;
        for (int j = 0; j < cfg_.nodes; ++j) {
            for (int src = 0; src < j + 2; ++src) {
                const index_t stride = (reduction && src < 2) ? 2 : 1;
                auto edge = std::make_unique<MixedEdge>(
                    cname + ".e" + std::to_string(edge_id), pairs_, c_curr, stride, cfg_.space,
                    root.derive(mod_id++));
                const index_t row = (reduction ? e_cell : 0) + edge_id;
                edge->bind_alpha(&alpha_.logits[static_cast<size_t>(row)],
                                 &alpha_.grads[static_cast<size_t>(row)]);
                cell.edge_ends.push_back({src, j + 2});
                cell.edges.push_back(edge.get());
                cell.edge_storage.push_back(std::move(edge));
                ++edge_id;
            }
        }
        cells_.push_back(std::move(cell));
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = static_cast<index_t>(cfg_.nodes) * c_curr;
    }
    gap_ = std::make_unique<GlobalAvgPoolModule>();
    head_ = std::make_unique<DenseModule>("head", c_p, cfg_.num_classes, cfg_.head_rule, true,
                                          root.derive(mod_id++));
    cell_inputs0_.resize(static_cast<size_t>(cfg_.cells));
    cell_inputs1_.resize(static_cast<size_t>(cfg_.cells));
}

Tensor Supernet::cell_forward(CellGraph& cell, const Tensor& s0, const Tensor& s1, Context& ctx) {
    cell.in0 = cell.prep0->forward(s0, ctx);
    cell.in1 = cell.prep1->forward(s1, ctx);
    std::vector<Tensor> states{cell.in0, cell.in1};
    size_t e = 0;
    for (int j = 0; j < cfg_.nodes; ++j) {
        Tensor node;
        for (int src = 0; src < j + 2; ++src, ++e)
            accumulate(node, cell.edges[e]->forward(states[static_cast<size_t>(src)], ctx));
        states.push_back(std::move(node));
    }
    cell.node_out = states;
    return concat_channels(std::vector<Tensor>(states.begin() + 2, states.end()));
}

std::pair<Tensor, Tensor> Supernet::cell_backward(CellGraph& cell, const Tensor& grad_out,
                                                  Context& ctx) {
    std::vector<Shape> shapes;
    for (size_t j = 2; j < cell.node_out.size(); ++j) shapes.push_back(cell.node_out[j].shape());
    std::vector<Tensor> node_grad(cell.node_out.size());
    std::vector<Tensor> slices = split_channels(grad_out, shapes);
    for (size_t j = 0; j < slices.size(); ++j) node_grad[j + 2] = std::move(slices[j]);

    for (int j = cfg_.nodes - 1; j >= 0; --j) {
        // edge index of this node's first incoming edge
        size_t base = 0;
        for (int jj = 0; jj < j; ++jj) base += static_cast<size_t>(jj + 2);
        const Tensor& g_node = node_grad[static_cast<size_t>(j + 2)];
        for (int src = j + 1; src >= 0; --src) {
            Tensor g_src = cell.edges[base + static_cast<size_t>(src)]->backward(g_node, ctx);
            accumulate(node_grad[static_cast<size_t>(src)], g_src);
        }
    }
    Tensor g0 = cell.prep0->backward(node_grad[0], ctx);
    Tensor g1 = cell.prep1->backward(node_grad[1], ctx);
    return {std::move(g0), std::move(g1)};
}

Tensor Supernet::forward(const Tensor& x, Context& ctx) {
    Tensor cur = norm_->forward(x, ctx);
    stem_out_ = stem_->forward(cur, ctx);
    Tensor s0 = stem_out_, s1 = stem_out_;
    for (size_t i = 0; i < cells_.size(); ++i) {
        cell_inputs0_[i] = s0;
        cell_inputs1_[i] = s1;
        Tensor out = cell_forward(cells_[i], s0, s1, ctx);
        s0 = s1;
        s1 = std::move(out);
    }
    Tensor pooled = gap_->forward(s1, ctx);
    return head_->forward(pooled, ctx);
}

Tensor Supernet::backward(const Tensor& grad_out, Context& ctx) {
    Tensor g = head_->backward(grad_out, ctx);
    g = gap_->backward(g, ctx);
    // grad w.r.t. each cell output, threading the skip topology
    std::vector<Tensor> gout(cells_.size());
    Tensor g_stem;
    if (cells_.empty())
        g_stem = g;
    else
        gout.back() = g;
    for (size_t i = cells_.size(); i-- > 0;) {
        if (gout[i].empty()) continue;
        auto [g0, g1] = cell_backward(cells_[i], gout[i], ctx);
        if (i >= 1)
            accumulate(gout[i - 1], g1);
        else
            accumulate(g_stem, g1);
        if (i >= 2)
            accumulate(gout[i - 2], g0);
        else
            accumulate(g_stem, g0);
    }
    Tensor gx = stem_->backward(g_stem, ctx);
    return norm_->backward(gx, ctx);
}

std::vector<Param*> Supernet::params() {
    std::vector<Param*> out;
    stem_->collect_params(out);
    for (auto& cell : cells_) {
        cell.prep0->collect_params(out);
        cell.prep1->collect_params(out);
        for (auto& e : cell.edge_storage) e->collect_params(out);
    }
    head_->collect_params(out);
    return out;
}

void Supernet::save_state(StateTensors& t, StateCounters& c) {
    stem_->save_state(t, c);
    for (auto& cell : cells_) {
        cell.prep0->save_state(t, c);
        cell.prep1->save_state(t, c);
        for (auto& e : cell.edge_storage) e->save_state(t, c);
    }
    head_->save_state(t, c);
    Tensor a({alpha_.rows(), static_cast<index_t>(pairs_.size())});
    for (index_t r = 0; r < alpha_.rows(); ++r)
        for (index_t k = 0; k < alpha_.row_size(r); ++k)
            a[r * static_cast<index_t>(pairs_.size()) + k] = alpha_.logits[r][k];
    t["alpha.logits"] = a;
}

void Supernet::load_state(const StateTensors& t, const StateCounters& c) {
    stem_->load_state(t, c);
    for (auto& cell : cells_) {
        cell.prep0->load_state(t, c);
        cell.prep1->load_state(t, c);
        for (auto& e : cell.edge_storage) e->load_state(t, c);
    }
    head_->load_state(t, c);
    if (auto it = t.find("alpha.logits"); it != t.end()) {
        const Tensor& a = it->second;
        if (a.dim(0) != alpha_.rows() || a.dim(1) != static_cast<index_t>(pairs_.size()))
            throw DataError("checkpoint alpha shape mismatch");
        for (index_t r = 0; r < alpha_.rows(); ++r)
            for (index_t k = 0; k < alpha_.row_size(r); ++k)
                alpha_.logits[r][k] = a[r * static_cast<index_t>(pairs_.size()) + k];
    }
}

std::unique_ptr<Model> Supernet::clone() const {
    auto copy = std::make_unique<Supernet>(cfg_);
    StateTensors t;
    StateCounters c;
    const_cast<Supernet*>(this)->save_state(t, c);
    copy->load_state(t, c);
    return copy;
}

Genotype Supernet::derive() const {
    return derive_genotype(alpha_, pairs_, cfg_.nodes, cfg_.init_channels, cfg_.cells);
}

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

Genotype derive_genotype(const ArchParams& alpha, const std::vector<CandidatePair>& pairs,
                         int nodes, index_t init_channels, int layers) {
    Genotype g;
    g.init_channels = init_channels;
    g.layers = layers;
    const index_t e_cell = edges_per_cell(nodes);
    for (int cell_type = 0; cell_type < 2; ++cell_type) {
        std::vector<GenotypeEntry>& out = cell_type == 0 ? g.normal : g.reduce;
        index_t edge_id = 0;
        for (int j = 0; j < nodes; ++j) {
            struct Choice {
                int src;
                size_t pair_idx;
                double weight;
            };
            std::vector<Choice> choices;
            for (int src = 0; src < j + 2; ++src, ++edge_id) {
                const index_t row = (cell_type == 1 ? e_cell : 0) + edge_id;
                const std::vector<double> w = softmax(alpha.logits[static_cast<size_t>(row)]);
                // best non-zero pair, ties resolved to the lowest index
                size_t best = pairs.size();
                for (size_t k = 0; k < pairs.size(); ++k) {
                    if (pairs[k].op == OpKind::zero) continue;
                    if (best == pairs.size() || w[k] > w[best]) best = k;
                }
                if (best == pairs.size()) throw ConfigError("derive_genotype: only zero candidates");
                choices.push_back({src, best, w[best]});
            }
            // keep the two strongest incoming edges (DARTS convention)
            std::stable_sort(choices.begin(), choices.end(), [](const Choice& a, const Choice& b) {
                if (a.weight != b.weight) return a.weight > b.weight;
                return a.src < b.src;
            });
            const size_t keep = std::min<size_t>(2, choices.size());
            std::vector<Choice> kept(choices.begin(), choices.begin() + static_cast<long>(keep));
            std::sort(kept.begin(), kept.end(),
                      [](const Choice& a, const Choice& b) { return a.src < b.src; });
            for (const Choice& ch : kept)
                out.push_back({ch.src, pairs[ch.pair_idx].op, pairs[ch.pair_idx].rule});
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Discrete network
// ---------------------------------------------------------------------------

Network::Network(Genotype genotype, NetworkConfig cfg)
    : geno_(std::move(genotype)), cfg_(std::move(cfg)) {
    if (geno_.layers < 2) throw ConfigError("Network: need at least 2 layers");
    if (geno_.normal.empty() || geno_.normal.size() % 2 != 0 || geno_.reduce.size() % 2 != 0)
        throw ConfigError("Network: malformed genotype (two entries per node expected)");
    if (geno_.normal.size() != geno_.reduce.size())
        throw ConfigError("Network: normal/reduce node counts differ");
    const int nodes = static_cast<int>(geno_.normal.size() / 2);

    RngStream root(cfg_.seed, 0x4e4554);
    uint64_t mod_id = 0;
    norm_ = std::make_unique<NormalizeModule>(cfg_.norm_mean, cfg_.norm_std);
    const index_t c_stem = geno_.init_channels * cfg_.stem_multiplier;
    stem_ = make_stem(cfg_.input_channels, c_stem, cfg_.stem_rule, root.derive(mod_id++));

    index_t c_pp = c_stem, c_p = c_stem, c_curr = geno_.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < geno_.layers; ++i) {
        const bool reduction = i == geno_.layers / 3 || i == 2 * geno_.layers / 3;
        if (reduction) c_curr *= 2;
        CellGraph cell;
        cell.reduction = reduction;
        const std::string cname = "c" + std::to_string(i);
        cell.prep0 = make_preprocess(cname + ".p0", c_pp, c_curr, reduction_prev, cfg_.stem_rule,
                                     root.derive(mod_id++));
        cell.prep1 = make_preprocess(cname + ".p1", c_p, c_curr, false, cfg_.stem_rule,
                                     root.derive(mod_id++));
        const std::vector<GenotypeEntry>& entries = reduction ? geno_.reduce : geno_.normal;
        cell.node_edges.resize(static_cast<size_t>(nodes));
        for (int j = 0; j < nodes; ++j) {
            for (int slot = 0; slot < 2; ++slot) {
                const GenotypeEntry& e = entries[static_cast<size_t>(2 * j + slot)];
                if (e.src < 0 || e.src >= j + 2)
                    throw ConfigError("Network: genotype edge source " + std::to_string(e.src) +
                                      " invalid for node " + std::to_string(j));
                if (e.rule == Rule::dfa)
                    throw ConfigError("Network: rule 'dfa' not supported in cell ops");
                const index_t stride = (reduction && e.src < 2) ? 2 : 1;
                if ((is_conv_op(e.op) || (e.op == OpKind::skip_connect && stride == 2)) &&
                    e.rule == Rule::none)
                    throw ConfigError("Network: op '" + op_token(e.op) + "' requires a rule");
                EdgeOp op;
                op.src = e.src;
                op.is_identity = e.op == OpKind::skip_connect && stride == 1;
                op.op = build_pair_module(
                    cname + ".n" + std::to_string(j) + "s" + std::to_string(slot), {e.op, e.rule},
                    c_curr, stride, cfg_.space, root.derive(mod_id++));
                cell.node_edges[static_cast<size_t>(j)].push_back(std::move(op));
            }
        }
        cells_.push_back(std::move(cell));
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = static_cast<index_t>(nodes) * c_curr;
    }
    gap_ = std::make_unique<GlobalAvgPoolModule>();
    head_ = std::make_unique<DenseModule>("head", c_p, cfg_.num_classes, cfg_.head_rule, true,
                                          root.derive(mod_id++));
    cell_inputs0_.resize(cells_.size());
    cell_inputs1_.resize(cells_.size());
}

Tensor Network::cell_forward(CellGraph& cell, const Tensor& s0, const Tensor& s1, Context& ctx) {
    Tensor in0 = cell.prep0->forward(s0, ctx);
    Tensor in1 = cell.prep1->forward(s1, ctx);
    std::vector<Tensor> states{std::move(in0), std::move(in1)};
    for (auto& node : cell.node_edges) {
        Tensor acc;
        for (EdgeOp& e : node) {
            Tensor y = e.op->forward(states[static_cast<size_t>(e.src)], ctx);
            e.drop_mask = Tensor();
            if (ctx.training && ctx.drop_path_prob > 0 && !e.is_identity && ctx.drop_rng) {
                const index_t n = y.dim(0);
                e.drop_mask = Tensor({n});
                const double keep_scale = 1.0 / (1.0 - ctx.drop_path_prob);
                const index_t stride = y.numel() / n;
                for (index_t s = 0; s < n; ++s) {
                    const double f = ctx.drop_rng->uniform() < ctx.drop_path_prob ? 0.0 : keep_scale;
                    e.drop_mask[s] = f;
                    double* row = y.data() + s * stride;
                    for (index_t p = 0; p < stride; ++p) row[p] *= f;
                }
            }
            accumulate(acc, y);
        }
        states.push_back(std::move(acc));
    }
    cell.node_out = states;
    return concat_channels(std::vector<Tensor>(states.begin() + 2, states.end()));
}

std::pair<Tensor, Tensor> Network::cell_backward(CellGraph& cell, const Tensor& grad_out,
                                                 Context& ctx) {
    std::vector<Shape> shapes;
    for (size_t j = 2; j < cell.node_out.size(); ++j) shapes.push_back(cell.node_out[j].shape());
    std::vector<Tensor> node_grad(cell.node_out.size());
    std::vector<Tensor> slices = split_channels(grad_out, shapes);
    for (size_t j = 0; j < slices.size(); ++j) node_grad[j + 2] = std::move(slices[j]);

    for (size_t j = cell.node_edges.size(); j-- > 0;) {
        const Tensor& g_node = node_grad[j + 2];
        if (g_node.empty()) continue;
        for (auto it = cell.node_edges[j].rbegin(); it != cell.node_edges[j].rend(); ++it) {
            Tensor g_edge = g_node;
            if (!it->drop_mask.empty()) {
                const index_t n = g_edge.dim(0);
                const index_t stride = g_edge.numel() / n;
                for (index_t s = 0; s < n; ++s) {
                    double* row = g_edge.data() + s * stride;
                    const double f = it->drop_mask[s];
                    for (index_t p = 0; p < stride; ++p) row[p] *= f;
                }
            }
            accumulate(node_grad[static_cast<size_t>(it->src)], it->op->backward(g_edge, ctx));
        }
    }
    Tensor g0 = cell.prep0->backward(node_grad[0], ctx);
    Tensor g1 = cell.prep1->backward(node_grad[1], ctx);
    return {std::move(g0), std::move(g1)};
}

Tensor Network::forward(const Tensor& x, Context& ctx) {
    Tensor cur = norm_->forward(x, ctx);
    stem_out_ = stem_->forward(cur, ctx);
    Tensor s0 = stem_out_, s1 = stem_out_;
    for (size_t i = 0; i < cells_.size(); ++i) {
        cell_inputs0_[i] = s0;
        cell_inputs1_[i] = s1;
        Tensor out = cell_forward(cells_[i], s0, s1, ctx);
        s0 = s1;
        s1 = std::move(out);
    }
    Tensor pooled = gap_->forward(s1, ctx);
    return head_->forward(pooled, ctx);
}

Tensor Network::backward(const Tensor& grad_out, Context& ctx) {
    Tensor g = head_->backward(grad_out, ctx);
    g = gap_->backward(g, ctx);
    std::vector<Tensor> gout(cells_.size());
    Tensor g_stem;
    if (cells_.empty())
        g_stem = g;
    else
        gout.back() = g;
    for (size_t i = cells_.size(); i-- > 0;) {
        if (gout[i].empty()) continue;
        auto [g0, g1] = cell_backward(cells_[i], gout[i], ctx);
        if (i >= 1)
            accumulate(gout[i - 1], g1);
        else
            accumulate(g_stem, g1);
        if (i >= 2)
            accumulate(gout[i - 2], g0);
        else
            accumulate(g_stem, g0);
    }
    Tensor gx = stem_->backward(g_stem, ctx);
    return norm_->backward(gx, ctx);
}

std::vector<Param*> Network::params() {
    std::vector<Param*> out;
    stem_->collect_params(out);
    for (auto& cell : cells_) {
        cell.prep0->collect_params(out);
        cell.prep1->collect_params(out);
        for (auto& node : cell.node_edges)
            for (auto& e : node) e.op->collect_params(out);
    }
    head_->collect_params(out);
    return out;
}

void Network::save_state(StateTensors& t, StateCounters& c) {
    stem_->save_state(t, c);
    for (auto& cell : cells_) {
        cell.prep0->save_state(t, c);
        cell.prep1->save_state(t, c);
        for (auto& node : cell.node_edges)
            for (auto& e : node) e.op->save_state(t, c);
    }
    head_->save_state(t, c);
}

void Network::load_state(const StateTensors& t, const StateCounters& c) {
    stem_->load_state(t, c);
    for (auto& cell : cells_) {
        cell.prep0->load_state(t, c);
        cell.prep1->load_state(t, c);
        for (auto& node : cell.node_edges)
            for (auto& e : node) e.op->load_state(t, c);
    }
    head_->load_state(t, c);
}

std::unique_ptr<Model> Network::clone() const {
    auto copy = std::make_unique<Network>(geno_, cfg_);
    StateTensors t;
    StateCounters c;
    const_cast<Network*>(this)->save_state(t, c);
    copy->load_state(t, c);
    return copy;
}

}  // namespace bionas
