#include "bionas/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bionas {

using nlohmann::json;

std::string genotype_to_json(const Genotype& g) {
    json j;
    j["version"] = g.version;
    auto dump = [](const std::vector<GenotypeEntry>& entries) {
        json arr = json::array();
        for (const GenotypeEntry& e : entries)
            arr.push_back({e.src, op_token(e.op), rule_token(e.rule)});
        return arr;
    };
    j["normal"] = dump(g.normal);
    j["reduce"] = dump(g.reduce);
    j["init_channels"] = g.init_channels;
    j["layers"] = g.layers;
    return j.dump(2) + "\n";
}

Genotype genotype_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("genotype: malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DataError("genotype: top level must be an object");
    for (const auto& [key, _] : j.items())
        if (key != "version" && key != "normal" && key != "reduce" && key != "init_channels" &&
            key != "layers")
            throw DataError("genotype: unknown field '" + key + "'");
    for (const char* key : {"version", "normal", "reduce", "init_channels", "layers"})
        if (!j.contains(key)) throw DataError(std::string("genotype: missing field '") + key + "'");
    Genotype g;
    g.version = j["version"].get<int>();
    if (g.version != 1)
        throw DataError("genotype: unsupported version " + std::to_string(g.version));
    auto parse_entries = [](const json& arr, const char* which) {
        if (!arr.is_array()) throw DataError(std::string("genotype: '") + which + "' must be a list");
        std::vector<GenotypeEntry> out;
        for (const json& item : arr) {
            if (!item.is_array() || item.size() != 3)
                throw DataError(std::string("genotype: entries in '") + which +
                                "' must be [src, op, rule]");
            GenotypeEntry e;
            e.src = item[0].get<int>();
            e.op = op_from_token(item[1].get<std::string>());
            e.rule = rule_from_token(item[2].get<std::string>());
            out.push_back(e);
        }
        return out;
    };
    g.normal = parse_entries(j["normal"], "normal");
    g.reduce = parse_entries(j["reduce"], "reduce");
    g.init_channels = j["init_channels"].get<index_t>();
    g.layers = j["layers"].get<int>();
    return g;
}

void save_genotype(const std::string& path, const Genotype& g) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << genotype_to_json(g);
}

Genotype load_genotype(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return genotype_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'I', 'O', 'N', 'A', 'S', '0', '1'};

void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const unsigned char* p;
    size_t n, pos = 0;
    void need(size_t k, const char* what) {
        if (pos + k > n) throw DataError(std::string("checkpoint truncated reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(p[pos + i]) << (8 * i);
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t k, const char* what) {
        need(k, what);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, ck.version);
    put_u64(out, ck.epoch);
    put_u32(out, static_cast<uint32_t>(ck.counters.size()));
    for (const auto& [key, value] : ck.counters) {
        if (key.size() > 0xffff) throw DataError("checkpoint: counter key too long");
        put_u16(out, static_cast<uint16_t>(key.size()));
        out += key;
        put_u64(out, value);
    }
    const uint8_t dtype = default_precision() == Precision::f32 ? 1 : 0;
    put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        if (name.size() > 0xffff) throw DataError("checkpoint: tensor name too long");
        if (t.rank() > 8) throw DataError("checkpoint: tensor rank > 8 for '" + name + "'");
        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(dtype));
        out.push_back(static_cast<char>(t.rank()));
        for (index_t d = 0; d < t.rank(); ++d) {
            if (t.dim(d) < 0 || t.dim(d) > (index_t(1) << 32))
                throw DataError("checkpoint: dimension overflow for '" + name + "'");
            put_u64(out, static_cast<uint64_t>(t.dim(d)));
        }
        for (index_t i = 0; i < t.numel(); ++i) {
            if (dtype == 1) {
                const float f = static_cast<float>(t[i]);
                uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(out, bits);
            } else {
                uint64_t bits;
                const double d = t[i];
                std::memcpy(&bits, &d, 8);
                put_u64(out, bits);
            }
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{reinterpret_cast<const unsigned char*>(buf.data()), buf.size()};
    r.need(8, "magic");
    if (std::memcmp(buf.data(), kMagic, 8) != 0)
        throw DataError("'" + path + "' is not a BIONAS01 checkpoint");
    r.pos = 8;
    Checkpoint ck;
    ck.version = r.u32("version");
    if (ck.version != 1)
        throw DataError("checkpoint version " + std::to_string(ck.version) + " unsupported");
    ck.epoch = r.u64("epoch");
    const uint32_t n_counters = r.u32("counter count");
    for (uint32_t i = 0; i < n_counters; ++i) {
        const uint16_t klen = r.u16("counter key length");
        std::string key = r.str(klen, "counter key");
        ck.counters[key] = r.u64("counter value");
    }
    const uint32_t n_tensors = r.u32("tensor count");
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const uint16_t nlen = r.u16("tensor name length");
        std::string name = r.str(nlen, "tensor name");
        r.need(2, "tensor header");
        const uint8_t dtype = r.p[r.pos++];
        const uint8_t rank = r.p[r.pos++];
        if (dtype > 1) throw DataError("checkpoint: unknown dtype for '" + name + "'");
        if (rank > 8) throw DataError("checkpoint: rank overflow for '" + name + "'");
        Shape shape;
        for (int d = 0; d < rank; ++d) shape.push_back(static_cast<index_t>(r.u64("dimension")));
        Tensor t(shape);
        for (index_t k = 0; k < t.numel(); ++k) {
            if (dtype == 1) {
                const uint32_t bits = r.u32("payload");
                float v;
                std::memcpy(&v, &bits, 4);
                t[k] = static_cast<double>(v);
            } else {
                const uint64_t bits = r.u64("payload");
                double v;
                std::memcpy(&v, &bits, 8);
                t[k] = v;
            }
        }
        ck.tensors[name] = std::move(t);
    }
    return ck;
}

void momentum_to_state(const MomentumState& mom, StateTensors& t) {
    for (const auto& [name, v] : mom.v) t["opt." + name] = v;
}

void momentum_from_state(MomentumState& mom, const StateTensors& t) {
    mom.v.clear();
    for (const auto& [name, v] : t)
        if (name.rfind("opt.", 0) == 0) mom.v[name.substr(4)] = v;
}

// ---------------------------------------------------------------------------
// Flat config text
// ---------------------------------------------------------------------------

KvConfig parse_kv_text(const std::string& text) {
    KvConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const size_t a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const size_t b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

KvConfig parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_kv_text(ss.str());
}

std::string kv_to_text(const KvConfig& kv) {
    std::ostringstream out;
    for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
    return out.str();
}

void write_kv_file(const std::string& path, const KvConfig& kv) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << kv_to_text(kv);
}

std::string kv_str(const KvConfig& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

double kv_double(const KvConfig& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
    }
}

int64_t kv_int(const KvConfig& kv, const std::string& key, int64_t fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + it->second + "' is not an integer");
    }
}

bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "': '" + it->second + "' is not a boolean");
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows, const std::string& comment) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    if (!comment.empty()) f << "# " << comment << "\n";
    for (size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
    f << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
        f << "\n";
    }
}

namespace {
std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}
}  // namespace

void write_search_log(const std::string& path, const std::vector<SearchLogRow>& rows) {
    std::vector<std::vector<std::string>> out;
    for (const SearchLogRow& r : rows)
        out.push_back({std::to_string(r.epoch), r.engine, fmt(r.train_loss), fmt(r.val_loss),
                       fmt(r.val_acc), fmt(r.alpha_entropy), fmt(r.wall_seconds)});
    write_csv(path, {"epoch", "engine", "train_loss", "val_loss", "val_acc", "alpha_entropy",
                     "wall_seconds"},
              out);
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& rows) {
    std::vector<std::vector<std::string>> out;
    for (const EpochLog& r : rows)
        out.push_back({std::to_string(r.epoch), fmt(r.lr), fmt(r.train_loss), fmt(r.train_acc),
                       fmt(r.val_loss), fmt(r.val_acc), fmt(r.grad_variance), fmt(r.wall_seconds)});
    write_csv(path, {"epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc",
                     "grad_variance", "wall_seconds"},
              out,
              "grad_variance: mean over parameters of per-parameter variance across the epoch's "
              "batch pseudo-gradients (post-clip)");
}

}  // namespace bionas
