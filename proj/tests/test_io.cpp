#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "bionas/api.hpp"
#include "bionas/serialize.hpp"
#include "helpers.hpp"

using namespace bionas;
using testutil::random_tensor;

TEST_SUITE_BEGIN("cli-io");

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/bionas_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("cifar10 binary loader") {
    SUBCASE("hand-crafted single record decodes exactly") {
        TempFile f("cifar1.bin");
        std::ofstream out(f.path, std::ios::binary);
        out.put(3);  // label
        for (int p = 0; p < 3072; ++p) out.put(static_cast<char>(p % 256));
        out.close();
        Dataset ds = load_cifar10_bin(f.path);
        REQUIRE(ds.size() == 1);
        CHECK(ds.labels[0] == 3);
        CHECK(ds.images.shape() == Shape{1, 3, 32, 32});
        for (index_t p = 0; p < 3072; ++p)
            CHECK(ds.images[p] == doctest::Approx((p % 256) / 255.0));
    }

    SUBCASE("empty file gives an empty dataset") {
        TempFile f("cifar_empty.bin");
        std::ofstream(f.path, std::ios::binary).close();
        Dataset ds = load_cifar10_bin(f.path);
        CHECK(ds.size() == 0);
    }

    SUBCASE("stray bytes are rejected with the offset") {
        TempFile f("cifar_bad.bin");
        std::ofstream out(f.path, std::ios::binary);
        for (int p = 0; p < 3073 + 5; ++p) out.put(1);
        out.close();
        try {
            load_cifar10_bin(f.path);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("3073") != std::string::npos);
            CHECK(std::string(e.what()).find("3073") != std::string::npos);
        }
    }

    SUBCASE("label greater than 9 is rejected") {
        TempFile f("cifar_label.bin");
        std::ofstream out(f.path, std::ios::binary);
        out.put(12);
        for (int p = 0; p < 3072; ++p) out.put(0);
        out.close();
        CHECK_THROWS_AS(load_cifar10_bin(f.path), DataError);
    }

    SUBCASE("write/read round trip is exact") {
        Dataset ds = gen_synthetic(4, 3, 32, 0.2, 17);
        TempFile f("cifar_rt.bin");
        write_cifar10_bin(f.path, ds);
        Dataset back = load_cifar10_bin(f.path);
        REQUIRE(back.size() == ds.size());
        for (size_t i = 0; i < ds.labels.size(); ++i) CHECK(back.labels[i] == ds.labels[i]);
        for (index_t i = 0; i < ds.images.numel(); ++i) {
            // quantized to bytes on disk
            const double q = std::lround(std::clamp(ds.images[i], 0.0, 1.0) * 255.0) / 255.0;
            CHECK(back.images[i] == doctest::Approx(q).epsilon(1e-12));
        }
    }
}

TEST_CASE("synthetic generator properties") {
    SUBCASE("same seed reproduces the dataset bit-exactly") {
        Dataset a = gen_synthetic(3, 5, 8, 0.3, 7);
        Dataset b = gen_synthetic(3, 5, 8, 0.3, 7);
        for (index_t i = 0; i < a.images.numel(); ++i) CHECK(a.images[i] == b.images[i]);
    }

    SUBCASE("noise-free classes are nearest-centroid separable") {
        Dataset train = gen_synthetic(4, 6, 8, 0.0, 9);
        // centroids per class
        const index_t dim = train.images.numel() / train.size();
        std::vector<Tensor> centroids(4, Tensor::zeros({dim}));
        std::vector<int> counts(4, 0);
        for (index_t i = 0; i < train.size(); ++i) {
            const int c = train.labels[static_cast<size_t>(i)];
            for (index_t j = 0; j < dim; ++j) centroids[c][j] += train.images[i * dim + j];
            counts[c]++;
        }
        for (int c = 0; c < 4; ++c) scale_inplace(centroids[c], 1.0 / counts[c]);
        index_t correct = 0;
        for (index_t i = 0; i < train.size(); ++i) {
            double best = 1e300;
            int best_c = -1;
            for (int c = 0; c < 4; ++c) {
                double d = 0;
                for (index_t j = 0; j < dim; ++j) {
                    const double diff = train.images[i * dim + j] - centroids[c][j];
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            correct += best_c == train.labels[static_cast<size_t>(i)];
        }
        CHECK(correct == train.size());
    }

    SUBCASE("one class means all labels zero") {
        Dataset ds = gen_synthetic(1, 7, 6, 0.1, 3);
        for (int l : ds.labels) CHECK(l == 0);
    }

    SUBCASE("pixels stay in [0,1] under heavy noise") {
        Dataset ds = gen_synthetic(2, 4, 6, 2.0, 5);
        for (index_t i = 0; i < ds.images.numel(); ++i) {
            CHECK(ds.images[i] >= 0.0);
            CHECK(ds.images[i] <= 1.0);
        }
    }
}

TEST_CASE("genotype json round trips and rejects malformed input") {
    Genotype g;
    g.init_channels = 12;
    g.layers = 6;
    g.normal = {{0, OpKind::sep_conv_3x3, Rule::usf}, {1, OpKind::max_pool_3x3, Rule::none}};
    g.reduce = {{0, OpKind::skip_connect, Rule::frsf}, {1, OpKind::zero, Rule::none}};

    SUBCASE("round trip identity") {
        Genotype back = genotype_from_json(genotype_to_json(g));
        CHECK(genotype_to_json(back) == genotype_to_json(g));
    }

    SUBCASE("file round trip") {
        TempFile f("geno.json");
        save_genotype(f.path, g);
        Genotype back = load_genotype(f.path);
        CHECK(genotype_to_json(back) == genotype_to_json(g));
    }

    SUBCASE("unknown rule token is named in the error") {
        const std::string bad = R"({"version":1,"normal":[[0,"sep_conv_3x3","usff"]],)"
                                R"("reduce":[],"init_channels":8,"layers":4})";
        try {
            genotype_from_json(bad);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("usff") != std::string::npos);
        }
    }

    SUBCASE("unknown op token is named in the error") {
        const std::string bad = R"({"version":1,"normal":[[0,"sep_conv_7x7","usf"]],)"
                                R"("reduce":[],"init_channels":8,"layers":4})";
        try {
            genotype_from_json(bad);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("sep_conv_7x7") != std::string::npos);
        }
    }

    SUBCASE("unsupported version is rejected explicitly") {
        const std::string v99 =
            R"({"version":99,"normal":[],"reduce":[],"init_channels":8,"layers":4})";
        try {
            genotype_from_json(v99);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("99") != std::string::npos);
        }
    }

    SUBCASE("unknown fields are rejected") {
        const std::string extra =
            R"({"version":1,"normal":[],"reduce":[],"init_channels":8,"layers":4,"extra":1})";
        CHECK_THROWS_AS(genotype_from_json(extra), DataError);
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    Checkpoint ck;
    ck.epoch = 17;
    RngStream rng(91, 0);
    ck.tensors["model.w"] = random_tensor({3, 4, 2}, rng, -5, 5);
    ck.tensors["opt.model.w"] = random_tensor({3, 4, 2}, rng);
    // adversarially precise values
    ck.tensors["model.w"][0] = 1e-308;
    ck.tensors["model.w"][1] = -0.1 + 1e-17;
    ck.counters["layer0.rng"] = 123456789012345ull;

    TempFile f("ck.bin");
    save_checkpoint(f.path, ck);
    Checkpoint back = load_checkpoint(f.path);
    CHECK(back.epoch == 17);
    CHECK(back.counters.at("layer0.rng") == 123456789012345ull);
    REQUIRE(back.tensors.size() == 2);
    for (const auto& [name, t] : ck.tensors) {
        const Tensor& bt = back.tensors.at(name);
        REQUIRE(bt.shape() == t.shape());
        for (index_t i = 0; i < t.numel(); ++i) CHECK(bt[i] == t[i]);  // bitwise
    }

    SUBCASE("corrupted magic is rejected") {
        std::fstream fix(f.path, std::ios::in | std::ios::out | std::ios::binary);
        fix.put('X');
        fix.close();
        CHECK_THROWS_AS(load_checkpoint(f.path), DataError);
    }
}

TEST_CASE("checkpoint resume equals the uninterrupted run bit-exactly") {
    KvConfig kv;
    kv["dataset"] = "synth";
    kv["synth_classes"] = "3";
    kv["synth_per_class"] = "30";
    kv["synth_side"] = "6";
    kv["synth_noise"] = "0.1";
    kv["init_channels"] = "4";
    kv["layers"] = "2";
    kv["stem_multiplier"] = "1";
    kv["epochs"] = "6";
    kv["batch_size"] = "16";
    kv["lr"] = "0.02";
    kv["drop_path_prob"] = "0.1";

    Genotype g;
    g.init_channels = 4;
    g.layers = 2;
    g.normal = {{0, OpKind::sep_conv_3x3, Rule::usf},
                {1, OpKind::skip_connect, Rule::brsf},
                {0, OpKind::avg_pool_3x3, Rule::none},
                {2, OpKind::sep_conv_3x3, Rule::frsf}};
    g.reduce = g.normal;

    // straight-through run
    TrainOutcome full = api_train(kv, g, 42);

    // interrupted run: 3 epochs, checkpoint, resume for the rest
    TempFile mid("resume_mid.bin");
    {
        KvConfig first = kv;
        first["epochs"] = "6";  // schedule length stays the run's total
        Dataset train = dataset_from_kv(first, 42);
        Dataset test = dataset_from_kv(first, 42, true);
        NetworkConfig ncfg = network_config_from_kv(first, train, 42);
        Network net(g, ncfg);
        TrainConfig tc = train_config_from_kv(first, 42);
        MomentumState mom;
        TrainConfig three = tc;
        three.epochs = 6;
        // run only the first 3 epochs by cancelling via epoch callback
        std::atomic<bool> cancel{false};
        int seen = 0;
        train_model(net, train, test, three, mom, 0, nullptr, &cancel,
                    [&](const EpochLog& log) {
                        ++seen;
                        if (log.epoch == 2) cancel = true;
                    });
        CHECK(seen == 3);
        Checkpoint ck;
        ck.epoch = 3;
        net.save_state(ck.tensors, ck.counters);
        momentum_to_state(mom, ck.tensors);
        save_checkpoint(mid.path, ck);
    }
    TrainOutcome resumed = api_train(kv, g, 42, "", mid.path);

    CHECK(resumed.test_acc == full.test_acc);
    CHECK(resumed.test_loss == doctest::Approx(full.test_loss).epsilon(1e-15));

    // and the final weights agree bitwise
    TempFile a("full.bin"), b("resumed.bin");
    api_train(kv, g, 42, a.path);
    api_train(kv, g, 42, b.path, mid.path);
    Checkpoint ca = load_checkpoint(a.path), cb = load_checkpoint(b.path);
    REQUIRE(ca.tensors.size() == cb.tensors.size());
    for (const auto& [name, t] : ca.tensors) {
        const Tensor& bt = cb.tensors.at(name);
        for (index_t i = 0; i < t.numel(); ++i) CHECK(t[i] == bt[i]);
    }
}

TEST_CASE("golden files decode identically everywhere") {
    // committed fixtures guard the on-disk formats across platforms
    const std::string dir = std::string(BIONAS_GOLDEN_DIR);

    Checkpoint ck = load_checkpoint(dir + "/golden.ckpt");
    CHECK(ck.epoch == 7);
    CHECK(ck.counters.at("layer.rng") == 424242);
    const Tensor& w = ck.tensors.at("golden.W");
    REQUIRE(w.shape() == Shape{2, 3});
    CHECK(w[0] == 1.5);
    CHECK(w[1] == -0.25);
    CHECK(w[2] == 3.141592653589793);
    CHECK(w[3] == -1e-7);
    CHECK(w[4] == 0.0);
    CHECK(w[5] == 42.0);
    // re-serialization is byte-identical (format stability)
    TempFile rt("golden_rt.ckpt");
    save_checkpoint(rt.path, ck);
    std::ifstream f1(dir + "/golden.ckpt", std::ios::binary), f2(rt.path, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    Genotype g = load_genotype(dir + "/golden_genotype.json");
    CHECK(g.layers == 2);
    CHECK(g.init_channels == 8);
    REQUIRE(g.normal.size() == 4);
    CHECK(g.normal[0].op == OpKind::sep_conv_3x3);
    CHECK(g.normal[0].rule == Rule::usf);
    CHECK(g.reduce[1].rule == Rule::frsf);

    Dataset ds = load_cifar10_bin(dir + "/golden_cifar.bin");
    REQUIRE(ds.size() == 1);
    CHECK(ds.labels[0] == 5);
    CHECK(ds.images[0] == doctest::Approx(0.0));
    CHECK(ds.images[1] == doctest::Approx(3.0 / 255.0));
    CHECK(ds.images[100] == doctest::Approx(((100 * 3) % 251) / 255.0));
}

TEST_CASE("kv config parsing") {
    KvConfig kv = parse_kv_text("# preset\nlr = 0.05\nepochs= 12\nname =desk run\nflag = true\n");
    CHECK(kv_double(kv, "lr", 0) == doctest::Approx(0.05));
    CHECK(kv_int(kv, "epochs", 0) == 12);
    CHECK(kv_str(kv, "name", "") == "desk run");
    CHECK(kv_bool(kv, "flag", false));
    CHECK(kv_int(kv, "missing", 7) == 7);
    CHECK_THROWS_AS(parse_kv_text("lr 0.05\n"), ConfigError);
    CHECK_THROWS_AS(kv_double(parse_kv_text("lr = abc\n"), "lr", 0), ConfigError);
}

TEST_SUITE_END();
