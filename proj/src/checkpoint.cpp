#include "bevit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace bevit::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace {

using json = nlohmann::ordered_json;

struct Hasher {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    }
};

struct Writer {
    std::ofstream out;
    Hasher hash;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    }
    void raw(const void* data, std::size_t n, bool hashed = true) {
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (hashed) hash.update(data, n);
    }
    template <class V>
    void pod(V v) {
        raw(&v, sizeof v);
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    Hasher hash;
    std::string path;
    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("cannot open checkpoint: " + p);
    }
    void raw(void* data, std::size_t n, bool hashed = true) {
        in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw CorruptionError("checkpoint truncated: " + path);
        if (hashed) hash.update(data, n);
    }
    template <class V>
    V pod() {
        V v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (n > (1u << 20)) throw CorruptionError("checkpoint string length implausible: " + path);
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
};

template <class T>
const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

const char* origin_name(vit::BlockOrigin o) {
    return o == vit::BlockOrigin::Expanded ? "expanded" : "original";
}

// Zero-valued model with the right tensor shapes; values come from the records.
template <class T>
vit::ViTModel<T> build_skeleton(const vit::ViTConfig& cfg, const json& meta) {
    vit::ViTModel<T> m;
    m.cfg = cfg;
    const std::int64_t d = cfg.dim;
    auto zero_linear = [](std::int64_t in, std::int64_t out) {
        return vit::Linear<T>{num::Tensor<T>::zeros({in, out}, true),
                              num::Tensor<T>::zeros({out}, true)};
    };
    auto zero_ln = [d]() {
        return vit::LayerNormParams<T>{num::Tensor<T>::zeros({d}, true),
                                       num::Tensor<T>::zeros({d}, true)};
    };
    m.patch_embed = zero_linear(cfg.patch_dim(), d);
    m.cls_token = num::Tensor<T>::zeros({1, d}, true);
    m.pos_embed = num::Tensor<T>::zeros({cfg.tokens(), d}, true);
    for (const auto& blk : meta.at("blocks")) {
        vit::TransformerBlock<T> b;
        b.ln1 = zero_ln();
        b.qkv = zero_linear(d, 3 * d);
        b.proj = zero_linear(d, d);
        b.ln2 = zero_ln();
        b.fc1 = zero_linear(d, cfg.mlp_ratio * d);
        b.fc2 = zero_linear(cfg.mlp_ratio * d, d);
        b.origin = blk.at("origin").get<std::string>() == "expanded" ? vit::BlockOrigin::Expanded
                                                                     : vit::BlockOrigin::Original;
        vit::set_block_trainable(b, blk.at("trainable").get<bool>());
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = zero_ln();
    vit::set_embeddings_trainable(m, meta.at("embeddings_trainable").get<bool>());
    if (!meta.at("head").is_null()) {
        const auto& h = meta.at("head");
        vit::ClassifierHead<T> head;
        head.num_classes = h.at("classes").get<int>();
        head.strategy = vit::embedding_strategy_from(h.at("strategy").get<std::string>());
        const std::int64_t width =
            head.strategy == vit::EmbeddingStrategy::Concat ? 2 * d : d;
        head.linear = zero_linear(width, head.num_classes);
        m.head = std::move(head);
    }
    return m;
}

}  // namespace

template <class T>
void save_checkpoint(const vit::ViTModel<T>& model, const std::string& path) {
    json meta;
    meta["dtype"] = dtype_name<T>();
    meta["config"] = {
        {"image_size", model.cfg.image_size}, {"patch_size", model.cfg.patch_size},
        {"dim", model.cfg.dim},               {"depth", model.cfg.depth},
        {"heads", model.cfg.heads},           {"mlp_ratio", model.cfg.mlp_ratio},
        {"channels", model.cfg.channels},
    };
    meta["blocks"] = json::array();
    for (const auto& b : model.blocks)
        meta["blocks"].push_back({{"origin", origin_name(b.origin)}, {"trainable", b.trainable}});
    meta["embeddings_trainable"] = model.embeddings_trainable;
    if (model.head)
        meta["head"] = {{"classes", model.head->num_classes},
                        {"strategy", vit::to_string(model.head->strategy)}};
    else
        meta["head"] = nullptr;

    Writer w(path);
    w.raw(kMagic, sizeof kMagic, false);
    w.pod(kVersion);
    w.str(meta.dump());
    const auto params = vit::named_params(model);
    w.pod(static_cast<std::uint64_t>(params.size()));
    for (const auto& p : params) {
        w.str(p.name);
        w.pod(static_cast<std::uint8_t>(sizeof(T)));
        w.pod(static_cast<std::uint8_t>(p.tensor.requires_grad() ? 1 : 0));
        w.pod(static_cast<std::uint32_t>(p.tensor.ndim()));
        for (auto dim : p.tensor.shape()) w.pod(static_cast<std::int64_t>(dim));
        const auto vals = p.tensor.values();
        w.pod(static_cast<std::uint64_t>(vals.size_bytes()));
        w.raw(vals.data(), vals.size_bytes());
    }
    w.pod(w.hash.h);  // self-hashing the checksum field is avoided by ordering
    if (!w.out) throw IoError("checkpoint write failed: " + path);
}

template <class T>
vit::ViTModel<T> load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.raw(magic, sizeof magic, false);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw CorruptionError("not a checkpoint file: " + path);
    const auto version = r.pod<std::uint32_t>();
    if (version != kVersion)
        throw VersionError("checkpoint version " + std::to_string(version) + " unsupported");

    json meta;
    try {
        meta = json::parse(r.str());
    } catch (const std::exception& e) {
        throw CorruptionError("checkpoint metadata unreadable: " + std::string(e.what()));
    }
    const auto dtype = meta.at("dtype").get<std::string>();
    const auto& jc = meta.at("config");
    vit::ViTConfig cfg;
    cfg.image_size = jc.at("image_size").get<int>();
    cfg.patch_size = jc.at("patch_size").get<int>();
    cfg.dim = jc.at("dim").get<int>();
    cfg.depth = jc.at("depth").get<int>();
    cfg.heads = jc.at("heads").get<int>();
    cfg.mlp_ratio = jc.at("mlp_ratio").get<int>();
    cfg.channels = jc.at("channels").get<int>();

    auto model = build_skeleton<T>(cfg, meta);
    auto params = vit::named_params(model);

    const auto count = r.pod<std::uint64_t>();
    if (count != params.size())
        throw CorruptionError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                              std::to_string(params.size()));
    const auto elem_size = dtype == "f32" ? 4u : 8u;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name = r.str();
        if (name != params[i].name)
            throw CorruptionError("checkpoint tensor '" + name + "' arrived where '" +
                                  params[i].name + "' was expected");
        const auto stored_size = r.pod<std::uint8_t>();
        const auto trainable = r.pod<std::uint8_t>();
        if (stored_size != elem_size) throw CorruptionError("checkpoint dtype record disagrees");
        const auto ndim = r.pod<std::uint32_t>();
        num::Shape shape(ndim);
        for (auto& d2 : shape) d2 = r.pod<std::int64_t>();
        if (shape != params[i].tensor.shape())
            throw CorruptionError("checkpoint tensor '" + name + "' shape mismatch");
        const auto nbytes = r.pod<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(params[i].tensor.numel()) * elem_size)
            throw CorruptionError("checkpoint tensor '" + name + "' byte length mismatch");
        auto dst = params[i].tensor.values_mut();
        if (elem_size == sizeof(T)) {
            r.raw(dst.data(), dst.size_bytes());
        } else if (elem_size == 4) {
            std::vector<float> tmp(dst.size());
            r.raw(tmp.data(), tmp.size() * 4);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(tmp[j]);
        } else {
            std::vector<double> tmp(dst.size());
            r.raw(tmp.data(), tmp.size() * 8);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(tmp[j]);
        }
        if (params[i].name.rfind("head", 0) != 0)  // block/embedding flags come from meta
            (void)trainable;
    }
    const auto want = r.hash.h;
    const auto stored = r.pod<std::uint64_t>();
    if (stored != want) throw CorruptionError("checkpoint checksum mismatch: " + path);
    return model;
}

template void save_checkpoint(const vit::ViTModel<float>&, const std::string&);
template void save_checkpoint(const vit::ViTModel<double>&, const std::string&);
template vit::ViTModel<float> load_checkpoint(const std::string&);
template vit::ViTModel<double> load_checkpoint(const std::string&);

}  // namespace bevit::ckpt
