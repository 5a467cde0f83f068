#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bionas/api.hpp"

namespace py = pybind11;
using namespace bionas;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape;
    for (py::ssize_t d = 0; d < a.ndim(); ++d) shape.push_back(a.shape(d));
    Tensor t(shape);
    std::copy(a.data(), a.data() + t.numel(), t.data());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

KvConfig kv_from_dict(const py::dict& d) {
    KvConfig kv;
    for (const auto& item : d) kv[py::str(item.first)] = py::str(item.second);
    return kv;
}

py::dict search_py(const py::dict& config, const std::string& engine, uint64_t seed, int threads) {
    SearchOutcome res = api_search(kv_from_dict(config), engine, seed, threads);
    py::list log;
    for (const SearchLogRow& r : res.log) {
        py::dict row;
        row["epoch"] = r.epoch;
        row["engine"] = r.engine;
        row["train_loss"] = r.train_loss;
        row["val_loss"] = r.val_loss;
        row["val_acc"] = r.val_acc;
        row["alpha_entropy"] = r.alpha_entropy;
        log.append(row);
    }
    py::dict out;
    out["genotype"] = genotype_to_json(res.genotype);
    out["log"] = log;
    return out;
}

py::dict train_py(const py::dict& config, const std::string& genotype_json, uint64_t seed,
                  const std::string& checkpoint_out) {
    Genotype g = genotype_from_json(genotype_json);
    TrainOutcome res = api_train(kv_from_dict(config), g, seed, checkpoint_out);
    py::dict out;
    out["test_acc"] = res.test_acc;
    out["test_loss"] = res.test_loss;
    py::list losses;
    for (const EpochLog& l : res.log) losses.append(l.train_loss);
    out["train_loss"] = losses;
    return out;
}

py::dict attack_py(const py::dict& config, const std::string& genotype_json,
                   const std::string& checkpoint, const std::string& kind, double epsilon,
                   double alpha, int steps, int n_samples, uint64_t seed) {
    KvConfig kv = kv_from_dict(config);
    Genotype g = genotype_from_json(genotype_json);
    auto net = restore_network(kv, g, seed, checkpoint);
    Dataset test = dataset_from_kv(kv, seed, true);
    std::vector<index_t> idx;
    for (index_t i = 0; i < std::min<index_t>(n_samples, test.size()); ++i) idx.push_back(i);
    Dataset batch = test.subset(idx);
    AttackConfig cfg;
    cfg.kind = kind;
    cfg.epsilon = epsilon;
    cfg.alpha_step = alpha;
    cfg.steps = steps;
    cfg.seed = seed;
    AttackResult res = run_attack(*net, batch, cfg);
    py::dict out;
    out["clean_acc"] = res.clean_acc;
    out["robust_acc"] = res.robust_acc;
    out["adversarial"] = array_from_tensor(res.adversarial);
    out["images"] = array_from_tensor(batch.images);
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "architecture + learning-rule search engine (native core)";

    py::register_exception<ConfigError>(m, "BionasConfigError");
    py::register_exception<DataError>(m, "BionasDataError");
    py::register_exception<NumericError>(m, "BionasNumericError");

    m.def(
        "matmul",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
            return array_from_tensor(matmul(tensor_from_array(a), tensor_from_array(b)));
        },
        py::arg("a"), py::arg("b"));

    m.def(
        "conv2d",
        [](const py::array_t<double>& x, const py::array_t<double>& w, index_t stride,
           index_t padding, index_t dilation, index_t groups) {
            Conv2dSpec sp{stride, padding, dilation, groups};
            return array_from_tensor(conv2d(tensor_from_array(x), tensor_from_array(w), sp));
        },
        py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("padding") = 0,
        py::arg("dilation") = 1, py::arg("groups") = 1);

    m.def(
        "pool2d",
        [](const py::array_t<double>& x, const std::string& kind, index_t k, index_t stride) {
            PoolKind pk = kind == "max" ? PoolKind::max : PoolKind::avg;
            return array_from_tensor(pool2d(tensor_from_array(x), pk, k, stride).y);
        },
        py::arg("x"), py::arg("kind"), py::arg("k") = 3, py::arg("stride") = 1);

    m.def(
        "relu",
        [](const py::array_t<double>& z) {
            ReluResult r = relu_forward(tensor_from_array(z));
            return py::make_tuple(array_from_tensor(r.y), array_from_tensor(r.deriv));
        },
        py::arg("z"));

    m.def(
        "softmax_cross_entropy",
        [](const py::array_t<double>& logits, const std::vector<int>& labels,
           double label_smoothing) {
            SoftmaxXentResult r =
                softmax_cross_entropy(tensor_from_array(logits), labels, label_smoothing);
            return py::make_tuple(r.loss, array_from_tensor(r.output_error));
        },
        py::arg("logits"), py::arg("labels"), py::arg("label_smoothing") = 0.0);

    m.def(
        "feedback_matrix",
        [](const std::string& rule, const py::array_t<double>& w, uint64_t seed) {
            const Rule r = rule_from_token(rule);
            Tensor wt = tensor_from_array(w);
            FeedbackState st = init_feedback_state(r, wt.shape(), RngStream(seed, 0xFB));
            return array_from_tensor(compute_feedback_matrix(r, wt, st));
        },
        py::arg("rule"), py::arg("w"), py::arg("seed") = 0);

    m.def(
        "gen_synthetic",
        [](int classes, int per_class, index_t side, double noise, uint64_t seed) {
            Dataset ds = gen_synthetic(classes, per_class, side, noise, seed);
            return py::make_tuple(array_from_tensor(ds.images), ds.labels);
        },
        py::arg("classes"), py::arg("per_class"), py::arg("side") = 8, py::arg("noise") = 0.1,
        py::arg("seed") = 0);

    m.def("search", &search_py, py::arg("config"), py::arg("engine") = "darts",
          py::arg("seed") = 0, py::arg("threads") = 1);
    m.def("train", &train_py, py::arg("config"), py::arg("genotype"), py::arg("seed") = 0,
          py::arg("checkpoint_out") = "");
    m.def("attack", &attack_py, py::arg("config"), py::arg("genotype"), py::arg("checkpoint"),
          py::arg("kind") = "fgsm", py::arg("epsilon") = 0.35, py::arg("alpha") = 2.0 / 255.0,
          py::arg("steps") = 10, py::arg("n_samples") = 32, py::arg("seed") = 0);

    m.def("rule_tokens", [] {
        return std::vector<std::string>{"bp", "fa", "dfa", "usf", "brsf", "frsf", "hebb", "pc"};
    });
    m.def("op_tokens", [] {
        std::vector<std::string> out;
        for (OpKind op : {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
                          OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
                          OpKind::skip_connect, OpKind::zero})
            out.push_back(op_token(op));
        return out;
    });
    m.def("set_precision", [](const std::string& p) {
        set_default_precision(p == "f32" ? Precision::f32 : Precision::f64);
    });

    m.attr("__version__") = "0.1.0";
}
