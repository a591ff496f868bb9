#include <filesystem>
#include <fstream>
#include <sstream>

#include "bevit/checkpoint.hpp"
#include "bevit/data.hpp"
#include "bevit/experiments.hpp"
#include "doctest.h"

using namespace bevit;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("bevit_cmd_" + tag);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

cfg::KvConfig tiny_base() {
    return cfg::KvConfig::from_string(
        "model.image_size = 16\n"
        "model.patch_size = 8\n"
        "model.dim = 16\n"
        "model.depth = 1\n"
        "model.heads = 2\n"
        "data.0.classes = 3\n"
        "data.0.n_per_class = 10\n"
        "finetune.epochs = 2\n"
        "finetune.batch_size = 8\n"
        "finetune.warmup = 2\n");
}

cli::RunContext ctx_for(const fs::path& out, std::uint64_t seed = 7) {
    cli::RunContext ctx;
    ctx.out_dir = out.string();
    ctx.seed = seed;
    return ctx;
}

std::vector<std::string> csv_lines(const fs::path& p) {
    std::vector<std::string> lines;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("cmd_synth writes a loadable dataset") {
    auto out = fresh_dir("synth");
    auto c = cfg::KvConfig::from_string(
        "data.0.classes = 3\n"
        "data.0.n_per_class = 4\n"
        "data.0.name = toyset\n");
    cli::cmd_synth(c, ctx_for(out));
    auto manifest = data::load_manifest((out / "toyset.csv").string());
    CHECK(manifest.records.size() == 12);
    auto splits = data::load_dataset(manifest, out.string(), 16);
    CHECK(splits.train.size() + splits.val.size() + splits.test.size() == 12);
    fs::remove_all(out);
}

TEST_CASE("cmd_finetune emits reports and reruns byte-identically") {
    auto out1 = fresh_dir("ft1");
    auto out2 = fresh_dir("ft2");
    auto c = tiny_base();
    cli::cmd_finetune(c, ctx_for(out1));
    cli::cmd_finetune(c, ctx_for(out2));

    for (const char* name :
         {"config_resolved.txt", "reports.csv", "report_test.json", "finetune_log.csv",
          "best.bvck"}) {
        CAPTURE(name);
        CHECK(slurp(out1 / name) == slurp(out2 / name));
    }
    // a different seed changes the outputs
    auto out3 = fresh_dir("ft3");
    cli::cmd_finetune(c, ctx_for(out3, 8));
    CHECK(slurp(out1 / "reports.csv") != slurp(out3 / "reports.csv"));

    // the emitted checkpoint loads and keeps the head
    auto best = ckpt::load_checkpoint<float>((out1 / "best.bvck").string());
    REQUIRE(best.head.has_value());
    CHECK(best.head->num_classes == 3);

    // every report row carries the resolved-config hash
    const auto resolved = cfg::KvConfig::from_string(slurp(out1 / "config_resolved.txt"));
    const auto rows = csv_lines(out1 / "reports.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].find(resolved.hash()) != std::string::npos);

    fs::remove_all(out1);
    fs::remove_all(out2);
    fs::remove_all(out3);
}

TEST_CASE("cmd_pretrain then finetune from the emitted encoder") {
    auto out = fresh_dir("pt");
    auto c = tiny_base();
    c.set("ssl.epochs", "1");
    c.set("ssl.batch_size", "4");
    c.set("ssl.prototypes", "16");
    c.set("ssl.hidden_dim", "16");
    c.set("ssl.bottleneck_dim", "8");
    c.set("ssl.local_crops", "1");
    c.set("data.0.n_per_class", "4");
    cli::cmd_pretrain(c, ctx_for(out));
    CHECK(fs::exists(out / "encoder.bvck"));
    const auto log = csv_lines(out / "ssl_log.csv");
    CHECK(log.size() >= 2);
    CHECK(log[0] == "step,loss,teacher_entropy,lr,ema_momentum");

    auto ft_out = fresh_dir("pt_ft");
    auto ftc = tiny_base();
    ftc.set("finetune.encoder", (out / "encoder.bvck").string());
    cli::cmd_finetune(ftc, ctx_for(ft_out));
    CHECK(fs::exists(ft_out / "reports.csv"));

    SUBCASE("be pretrain reports the expanded depth") {
        auto be_out = fresh_dir("pt_be");
        auto bc = tiny_base();
        bc.set("ssl.epochs", "1");
        bc.set("ssl.batch_size", "4");
        bc.set("ssl.prototypes", "16");
        bc.set("ssl.hidden_dim", "16");
        bc.set("ssl.bottleneck_dim", "8");
        bc.set("ssl.local_crops", "1");
        bc.set("data.0.n_per_class", "4");
        bc.set("model.expand_k", "1");
        bc.set("ssl.policy", "be_ssl");
        cli::cmd_pretrain(bc, ctx_for(be_out));
        auto enc = ckpt::load_checkpoint<float>((be_out / "encoder.bvck").string());
        CHECK(enc.depth() == 2);  // depth 1 + 1 expanded
        int n_expanded = 0;
        for (const auto& b : enc.blocks)
            if (b.origin == vit::BlockOrigin::Expanded) ++n_expanded;
        CHECK(n_expanded == 1);
        fs::remove_all(be_out);
    }
    fs::remove_all(out);
    fs::remove_all(ft_out);
}

TEST_CASE("cmd_msdft evaluates each test set plus the pool") {
    auto out = fresh_dir("msdft");
    auto c = tiny_base();
    c.set("data.count", "3");
    for (int i = 0; i < 3; ++i) {
        const auto p = "data." + std::to_string(i) + ".";
        c.set(p + "classes", "3");
        c.set(p + "n_per_class", "8");
        c.set(p + "domain", std::to_string(i % 2));
    }
    c.set("finetune.epochs", "1");
    cli::cmd_msdft(c, ctx_for(out));
    const auto rows = csv_lines(out / "reports.csv");
    REQUIRE(rows.size() == 5);  // header + 3 datasets + All

    // pooled sample count equals the sum of the parts
    auto field = [](const std::string& row, int idx) {
        std::istringstream in(row);
        std::string part;
        for (int i = 0; i <= idx; ++i) std::getline(in, part, ',');
        return part;
    };
    const int n0 = std::stoi(field(rows[1], 4));
    const int n1 = std::stoi(field(rows[2], 4));
    const int n2 = std::stoi(field(rows[3], 4));
    const int all = std::stoi(field(rows[4], 4));
    CHECK(all == n0 + n1 + n2);
    CHECK(field(rows[4], 1) == "All");
    CHECK(fs::exists(out / "msdft_heatmap.svg"));

    // pooled accuracy equals the sample-weighted mean of the parts
    const double a0 = std::stod(field(rows[1], 5));
    const double a1 = std::stod(field(rows[2], 5));
    const double a2 = std::stod(field(rows[3], 5));
    const double aall = std::stod(field(rows[4], 5));
    CHECK(aall == doctest::Approx((a0 * n0 + a1 * n1 + a2 * n2) / all).epsilon(1e-4));
    fs::remove_all(out);
}

TEST_CASE("cmd_crosseval covers every off-diagonal pair") {
    auto out = fresh_dir("xeval");
    auto c = tiny_base();
    c.set("data.count", "3");
    for (int i = 0; i < 3; ++i) {
        const auto p = "data." + std::to_string(i) + ".";
        c.set(p + "classes", "3");
        c.set(p + "n_per_class", "8");
    }
    c.set("finetune.epochs", "1");
    cli::cmd_crosseval(c, ctx_for(out));
    const auto rows = csv_lines(out / "reports.csv");
    CHECK(rows.size() == 1 + 6);  // header + 3*2 evaluations
    CHECK(fs::exists(out / "avg_reports.csv"));
    CHECK(fs::exists(out / "crosseval_qkappa.svg"));

    const auto avg = csv_lines(out / "avg_reports.csv");
    REQUIRE(avg.size() == 4);
    // each test dataset is averaged over the 2 runs that saw it
    for (std::size_t i = 1; i < avg.size(); ++i)
        CHECK(avg[i].find(",2,") != std::string::npos);
    fs::remove_all(out);
}

TEST_CASE("cmd_fewshot aggregates replicates") {
    auto out = fresh_dir("fewshot");
    auto c = tiny_base();
    c.set("data.0.n_per_class", "12");
    c.set("fewshot.grid", "1,2");
    c.set("fewshot.replicates", "3");
    c.set("finetune.epochs", "1");
    cli::cmd_fewshot(c, ctx_for(out));
    const auto rows = csv_lines(out / "reports.csv");
    CHECK(rows.size() == 1 + 2 * 3);  // header + grid x replicates
    const auto summary = csv_lines(out / "fewshot_summary.csv");
    CHECK(summary[0] == "mode,n_per_class,metric,mean,sd,sem");
    CHECK(summary.size() >= 1 + 2 * 4);
    CHECK(fs::exists(out / "fewshot_rank.csv"));
    fs::remove_all(out);
}

TEST_CASE("cmd_metrics recomputes a report from predictions") {
    auto out = fresh_dir("metrics");
    fs::create_directories(out);
    const auto pred = out / "preds.csv";
    std::ofstream(pred) << "label,p0,p1,p2\n"
                            "0,0.8,0.1,0.1\n"
                            "1,0.2,0.7,0.1\n"
                            "2,0.1,0.2,0.7\n"
                            "1,0.5,0.4,0.1\n";
    auto c = cfg::KvConfig::from_string("metrics.predictions = " + pred.string() + "\n");
    cli::cmd_metrics(c, ctx_for(out));
    const auto json = slurp(out / "report.json");
    CHECK(json.find("\"accuracy\": 0.75") != std::string::npos);
    CHECK(json.find("\"qkappa\"") != std::string::npos);
    fs::remove_all(out);
}

TEST_CASE("cmd_ablate sweeps the embedding axis") {
    auto out = fresh_dir("ablate");
    auto c = tiny_base();
    c.set("ablate.axis", "embedding");
    c.set("finetune.epochs", "1");
    cli::cmd_ablate(c, ctx_for(out));
    const auto rows = csv_lines(out / "ablate.csv");
    REQUIRE(rows.size() == 4);  // header + cls/patch_mean/concat
    CHECK(rows[1].find("embedding=cls") != std::string::npos);
    CHECK(rows[2].find("embedding=patch_mean") != std::string::npos);
    CHECK(rows[3].find("embedding=concat") != std::string::npos);
    fs::remove_all(out);
}
