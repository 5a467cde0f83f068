#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bionas/network.hpp"

namespace bionas {

enum class OpKind {
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
    max_pool_3x3,
    avg_pool_3x3,
    skip_connect,
    zero,
};

std::string op_token(OpKind op);
OpKind op_from_token(const std::string& tok);

/// One searchable choice on an edge: a computation plus the rule training
/// its parameters. Parameter-free ops (pools, zero) carry rule = none.
struct CandidatePair {
    OpKind op;
    Rule rule;
};

enum class SpaceMode {
    strict,   // ops keep their stated rule sets: 22 pairs (30 extended)
    paper32,  // every op crossed with the four feedback rules: 8 x 4 = 32
};

struct SearchSpaceConfig {
    SpaceMode mode = SpaceMode::strict;
    bool extended_rules = false;  // adds hebb/pc to the conv rule sets (strict mode)
    int pc_steps = 3;
    bool pc_gating = false;
    double hebbian_scale = 1e-4;
    bool hebbian_normalize = true;
    // When non-empty, overrides the derived pair list (used by the planted
    // search fixtures and desk configs).
    std::vector<CandidatePair> custom_pairs;
};

std::vector<CandidatePair> candidate_pairs(const SearchSpaceConfig& cfg);
std::vector<Rule> admissible_rules(OpKind op, const SearchSpaceConfig& cfg);

// ---------------------------------------------------------------------------
// Genotype
// ---------------------------------------------------------------------------

struct GenotypeEntry {
    int src = 0;  // node index the edge reads from (0,1 are the cell inputs)
    OpKind op = OpKind::skip_connect;
    Rule rule = Rule::none;
};

struct Genotype {
    int version = 1;
    std::vector<GenotypeEntry> normal;  // 2 entries per intermediate node
    std::vector<GenotypeEntry> reduce;
    index_t init_channels = 16;
    int layers = 5;
};

// ---------------------------------------------------------------------------
// Architecture parameters
// ---------------------------------------------------------------------------

/// Logits over candidate pairs, one row per edge; normal-cell rows first,
/// then reduce-cell rows. Shared across cells of the same type.
struct ArchParams {
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> grads;
    index_t normal_rows = 0;

    index_t rows() const { return static_cast<index_t>(logits.size()); }
    index_t row_size(index_t r) const { return static_cast<index_t>(logits[r].size()); }
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& flat);
    void zero_grads();
    /// Mean softmax entropy over edges (the search log's alpha_entropy).
    double mean_entropy() const;
};

std::vector<double> softmax(const std::vector<double>& logits);

/// Number of edges in one cell with V intermediate nodes (2 input nodes).
index_t edges_per_cell(int nodes);

// ---------------------------------------------------------------------------
// Mixed edge
// ---------------------------------------------------------------------------

/// Weighted sum of all candidate branches: sum_k softmax(alpha)_k r_k(o_k(x)).
/// During the alpha step the backward call also accumulates d loss / d alpha.
class MixedEdge : public Module {
public:
    MixedEdge(std::string name, const std::vector<CandidatePair>& pairs, index_t channels,
              index_t stride, const SearchSpaceConfig& space, RngStream rng);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

    void bind_alpha(std::vector<double>* logits, std::vector<double>* grads) {
        logits_ = logits;
        alpha_grads_ = grads;
    }
    const std::vector<CandidatePair>& pairs() const { return pairs_; }

private:
    std::string name_;
    std::vector<CandidatePair> pairs_;
    std::vector<ModulePtr> branches_;
    std::vector<Tensor> branch_out_;
    std::vector<double> weights_;  // softmax of the bound logits, cached
    std::vector<double>* logits_ = nullptr;
    std::vector<double>* alpha_grads_ = nullptr;
};

/// Builds the module implementing one (op, rule) pair at the given width
/// and stride. Exposed for tests and the discrete network builder.
ModulePtr build_pair_module(const std::string& name, const CandidatePair& pair, index_t channels,
                            index_t stride, const SearchSpaceConfig& space, RngStream rng);

// ---------------------------------------------------------------------------
// Supernet
// ---------------------------------------------------------------------------

struct SupernetConfig {
    index_t input_channels = 3;
    index_t init_channels = 16;
    int cells = 5;
    int nodes = 4;  // V
    int num_classes = 10;
    int stem_multiplier = 3;
    Rule head_rule = Rule::usf;
    Rule stem_rule = Rule::bp;
    SearchSpaceConfig space;
    std::vector<double> norm_mean{0.0, 0.0, 0.0};
    std::vector<double> norm_std{1.0, 1.0, 1.0};
    uint64_t seed = 0;
};

class Supernet : public Model {
public:
    explicit Supernet(SupernetConfig cfg);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    std::vector<Param*> params() override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;
    index_t num_classes() const override { return cfg_.num_classes; }
    std::unique_ptr<Model> clone() const override;

    ArchParams& alpha() { return alpha_; }
    const ArchParams& alpha() const { return alpha_; }
    const SupernetConfig& config() const { return cfg_; }
    Genotype derive() const;

private:
    struct CellGraph {
        bool reduction = false;
        ModulePtr prep0, prep1;
        std::vector<MixedEdge*> edges;           // owned below, indexed (dst asc, src asc)
        std::vector<ModulePtr> edge_storage;
        std::vector<std::pair<int, int>> edge_ends;  // (src, dst)
        // forward caches
        std::vector<Tensor> node_out;
        Tensor in0, in1;
    };
    Tensor cell_forward(CellGraph& cell, const Tensor& s0, const Tensor& s1, Context& ctx);
    std::pair<Tensor, Tensor> cell_backward(CellGraph& cell, const Tensor& grad_out, Context& ctx);

    SupernetConfig cfg_;
    ArchParams alpha_;
    std::vector<CandidatePair> pairs_;
    ModulePtr norm_;
    ModulePtr stem_;
    std::vector<CellGraph> cells_;
    ModulePtr gap_;
    ModulePtr head_;
    // forward caches for the backward pass
    std::vector<Tensor> cell_inputs0_, cell_inputs1_;
    Tensor stem_out_;
};

/// Argmax discretization: per edge the highest-logit non-zero pair (ties:
/// lowest index); per node the two incoming edges with the largest chosen
/// softmax weight.
Genotype derive_genotype(const ArchParams& alpha, const std::vector<CandidatePair>& pairs,
                         int nodes, index_t init_channels, int layers);

// ---------------------------------------------------------------------------
// Discrete network
// ---------------------------------------------------------------------------

struct NetworkConfig {
    index_t input_channels = 3;
    int num_classes = 10;
    int stem_multiplier = 3;
    Rule head_rule = Rule::usf;
    Rule stem_rule = Rule::bp;
    SearchSpaceConfig space;
    std::vector<double> norm_mean{0.0, 0.0, 0.0};
    std::vector<double> norm_std{1.0, 1.0, 1.0};
    uint64_t seed = 0;
};

/// The trained model built from a genotype: stem, `genotype.layers` cells
/// with reductions at 1/3 and 2/3 depth (channels doubled there), global
/// average pooling and a dense head carrying cfg.head_rule.
class Network : public Model {
public:
    Network(Genotype genotype, NetworkConfig cfg);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    std::vector<Param*> params() override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;
    index_t num_classes() const override { return cfg_.num_classes; }
    std::unique_ptr<Model> clone() const override;

    const Genotype& genotype() const { return geno_; }
    const NetworkConfig& config() const { return cfg_; }

private:
    struct EdgeOp {
        int src = 0;
        bool is_identity = false;  // skip at stride 1: exempt from drop-path
        ModulePtr op;
        Tensor drop_mask;  // per-sample factors applied in training
    };
    struct CellGraph {
        bool reduction = false;
        ModulePtr prep0, prep1;
        std::vector<std::vector<EdgeOp>> node_edges;  // per intermediate node
        std::vector<Tensor> node_out;
    };
    Tensor cell_forward(CellGraph& cell, const Tensor& s0, const Tensor& s1, Context& ctx);
    std::pair<Tensor, Tensor> cell_backward(CellGraph& cell, const Tensor& grad_out, Context& ctx);

    Genotype geno_;
    NetworkConfig cfg_;
    ModulePtr norm_;
    ModulePtr stem_;
    std::vector<CellGraph> cells_;
    ModulePtr gap_;
    ModulePtr head_;
    std::vector<Tensor> cell_inputs0_, cell_inputs1_;
    Tensor stem_out_;
};

}  // namespace bionas
