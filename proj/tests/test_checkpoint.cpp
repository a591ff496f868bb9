#include <filesystem>
#include <fstream>

#include "bevit/blockexp.hpp"
#include "bevit/checkpoint.hpp"
#include "bevit/config.hpp"
#include "doctest.h"

using namespace bevit;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / "bevit_ckpt";
    fs::create_directories(dir);
    return dir / name;
}

vit::ViTModel<float> sample_model() {
    vit::ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    auto model = vit::init_model<float>(cfg, 5);
    model = blockexp::expand_blocks(model, 1);
    vit::attach_head(model, 3, vit::EmbeddingStrategy::Concat, 6);
    blockexp::apply_freeze_policy(model, blockexp::FreezePolicy::BeSsl);
    return model;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise and keeps block tags") {
    auto model = sample_model();
    const auto path = temp_file("roundtrip.bvck").string();
    ckpt::save_checkpoint(model, path);
    auto loaded = ckpt::load_checkpoint<float>(path);

    CHECK(loaded.depth() == model.depth());
    for (int i = 0; i < model.depth(); ++i) {
        CHECK(loaded.blocks[static_cast<std::size_t>(i)].origin ==
              model.blocks[static_cast<std::size_t>(i)].origin);
        CHECK(loaded.blocks[static_cast<std::size_t>(i)].trainable ==
              model.blocks[static_cast<std::size_t>(i)].trainable);
    }
    CHECK(loaded.embeddings_trainable == model.embeddings_trainable);
    REQUIRE(loaded.head.has_value());
    CHECK(loaded.head->num_classes == 3);
    CHECK(loaded.head->strategy == vit::EmbeddingStrategy::Concat);

    auto a = vit::named_params(model);
    auto b = vit::named_params(loaded);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        const auto va = a[i].tensor.values();
        const auto vb = b[i].tensor.values();
        REQUIRE(va.size() == vb.size());
        for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
    }

    // freeze policies reapply correctly because the tags survived
    blockexp::apply_freeze_policy(loaded, blockexp::FreezePolicy::BeSsl);
    CHECK(vit::count_params(loaded, true) ==
          vit::params_per_block(model.cfg) * 1);
}

TEST_CASE("truncated checkpoint is rejected without a partial model") {
    auto model = sample_model();
    const auto path = temp_file("trunc.bvck").string();
    ckpt::save_checkpoint(model, path);
    const auto full = fs::file_size(path);
    fs::resize_file(path, full - 37);
    CHECK_THROWS_AS(ckpt::load_checkpoint<float>(path), CorruptionError);
}

TEST_CASE("bit flip fails the checksum") {
    auto model = sample_model();
    const auto path = temp_file("flip.bvck").string();
    ckpt::save_checkpoint(model, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
        char c;
        f.seekg(f.tellp());
        f.get(c);
        f.seekp(-1, std::ios::cur);
        c = static_cast<char>(c ^ 0x40);
        f.put(c);
    }
    CHECK_THROWS_AS(ckpt::load_checkpoint<float>(path), CorruptionError);
}

TEST_CASE("foreign magic and future version are rejected") {
    const auto path = temp_file("magic.bvck").string();
    std::ofstream(path, std::ios::binary) << "NOTACKPT0000";
    CHECK_THROWS_AS(ckpt::load_checkpoint<float>(path), CorruptionError);

    auto model = sample_model();
    const auto vpath = temp_file("version.bvck").string();
    ckpt::save_checkpoint(model, vpath);
    {
        std::fstream f(vpath, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
    }
    CHECK_THROWS_AS(ckpt::load_checkpoint<float>(vpath), VersionError);
}

TEST_CASE("precision conversion on load") {
    auto model = sample_model();
    const auto path = temp_file("convert.bvck").string();
    ckpt::save_checkpoint(model, path);
    auto wide = ckpt::load_checkpoint<double>(path);
    auto a = vit::named_params(model);
    auto b = vit::named_params(wide);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].tensor.values().size(); ++j)
            CHECK(static_cast<double>(a[i].tensor.values()[j]) == b[i].tensor.values()[j]);
}

TEST_CASE("kv config parses, dumps, and hashes deterministically") {
    const std::string text =
        "# comment\n"
        "model.dim = 64\n"
        "ssl.lr = 1e-3\n"
        "finetune.augment = true\n"
        "name = toy run\n";
    auto c = cfg::KvConfig::from_string(text);
    CHECK(c.get_int("model.dim", 0) == 64);
    CHECK(c.get_double("ssl.lr", 0) == doctest::Approx(1e-3));
    CHECK(c.get_bool("finetune.augment", false));
    CHECK(c.get_str("name", "") == "toy run");
    CHECK(c.get_int("missing", 17) == 17);

    auto c2 = cfg::KvConfig::from_string(c.dump_string());
    CHECK(c2.hash() == c.hash());
    c2.set_int("model.dim", 65);
    CHECK(c2.hash() != c.hash());

    CHECK_THROWS_AS(cfg::KvConfig::from_string("model.dim 64\n"), ConfigError);
    CHECK_THROWS_AS(cfg::KvConfig::from_string("model.dim = sixty\n").get_int("model.dim", 0),
                    ConfigError);
    CHECK_THROWS_AS(cfg::KvConfig::from_string("config_version = 9\n"), ConfigError);
}
