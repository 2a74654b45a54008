#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "polarpath/config.hpp"
#include "polarpath/pipeline.hpp"

using namespace polarpath;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small corpus so the pipeline-level tests stay quick.
nlohmann::json tiny_config(const fs::path& out_dir) {
    auto cfg = config::default_config();
    cfg["output_dir"] = out_dir.string();
    cfg["data"]["malignant_count"] = 2;
    cfg["data"]["benign_count"] = 2;
    cfg["data"]["borderline_count"] = 2;
    cfg["data"]["height"] = 64;
    cfg["data"]["width"] = 64;
    cfg["stage1"]["rounds"] = 10;
    cfg["stage1"]["max_depth"] = 3;
    return cfg;
}

int run_cli(const std::string& args) {
#ifdef POLARPATH_CLI_PATH
    const std::string cmd = std::string(POLARPATH_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
#else
    (void)args;
    return -1;
#endif
}

}  // namespace

TEST_CASE("default config exposes every stage section") {
    const auto cfg = config::default_config();
    for (const char* key : {"seed", "output_dir", "data", "stage1", "stage2", "stage3", "noise_exp"})
        REQUIRE(cfg.contains(key));
    REQUIRE_NOTHROW(config::validate_config(cfg));
}

TEST_CASE("config overlays override known keys and reject unknown ones") {
    const auto dir = fresh_dir("polarpath_cfg");
    io::write_text_file(dir / "ok.json", R"({"seed": 9, "stage1": {"folds": 3}})");
    const auto cfg = config::load_config(dir / "ok.json");
    REQUIRE(cfg["seed"] == 9);
    REQUIRE(cfg["stage1"]["folds"] == 3);
    REQUIRE(cfg["stage1"]["rounds"] == 50);  // untouched default

    io::write_text_file(dir / "bad.json", R"({"stage1": {"fodls": 3}})");
    REQUIRE_THROWS_AS(config::load_config(dir / "bad.json"), InvalidArgument);
    io::write_text_file(dir / "mangled.json", "{not json");
    REQUIRE_THROWS_AS(config::load_config(dir / "mangled.json"), FormatError);
}

TEST_CASE("config validation rejects out-of-range values") {
    auto cfg = config::default_config();
    cfg["data"]["coverage"] = 0.0;
    REQUIRE_THROWS_AS(config::validate_config(cfg), InvalidArgument);
    cfg = config::default_config();
    cfg["stage3"]["dropout"] = 1.0;
    REQUIRE_THROWS_AS(config::validate_config(cfg), InvalidArgument);
    cfg = config::default_config();
    cfg["stage1"]["folds"] = 1;
    REQUIRE_THROWS_AS(config::validate_config(cfg), InvalidArgument);
}

TEST_CASE("paper scale switches stage 2 to 224-pixel patches") {
    auto cfg = config::default_config();
    config::apply_paper_scale(cfg);
    REQUIRE(cfg["stage2"]["patch_side"] == 224);
    REQUIRE(cfg["stage2"]["embed_dim"] == 1024);
}

TEST_CASE("config hash is stable and key-sensitive") {
    const auto a = config::config_hash(config::default_config());
    REQUIRE(a == config::config_hash(config::default_config()));
    REQUIRE(a.size() == 16);
    auto cfg = config::default_config();
    cfg["seed"] = 2;
    REQUIRE(a != config::config_hash(cfg));
}

TEST_CASE("gen is deterministic: same seed, same slide checksums") {
    const auto cfg_a = tiny_config(fresh_dir("polarpath_gen_a"));
    const auto cfg_b = tiny_config(fresh_dir("polarpath_gen_b"));
    const auto ma = pipeline::run_gen(cfg_a);
    const auto mb = pipeline::run_gen(cfg_b);
    REQUIRE(ma["slide_count"] == 6);
    REQUIRE(ma["slide_checksums"] == mb["slide_checksums"]);

    auto cfg_c = tiny_config(fresh_dir("polarpath_gen_c"));
    cfg_c["seed"] = 2;
    REQUIRE(pipeline::run_gen(cfg_c)["slide_checksums"] != ma["slide_checksums"]);
}

TEST_CASE("stages demand their upstream artifacts by producer name") {
    const auto out = fresh_dir("polarpath_missing");
    const auto cfg = tiny_config(out);
    REQUIRE_THROWS_AS(pipeline::run_report(cfg), pipeline::MissingArtifact);
    for (auto run : {pipeline::run_stage1, pipeline::run_stage2, pipeline::run_stage3,
                     pipeline::run_noise_exp, pipeline::run_render}) {
        try {
            run(cfg);
            FAIL("expected MissingArtifact");
        } catch (const pipeline::MissingArtifact& e) {
            REQUIRE(e.producer_stage == "gen");
        }
    }
    pipeline::run_gen(cfg);
    try {
        pipeline::run_stage2(cfg);
        FAIL("expected MissingArtifact");
    } catch (const pipeline::MissingArtifact& e) {
        REQUIRE(e.producer_stage == "stage1");
    }
    try {
        pipeline::run_stage3(cfg);
        FAIL("expected MissingArtifact");
    } catch (const pipeline::MissingArtifact& e) {
        REQUIRE(e.producer_stage == "stage2");
    }
}

TEST_CASE("stage 1 writes maps, importance, and a manifest") {
    const auto out = fresh_dir("polarpath_s1");
    const auto cfg = tiny_config(out);
    pipeline::run_gen(cfg);
    const auto metrics = pipeline::run_stage1(cfg);
    REQUIRE(metrics["mean_annotated_accuracy"].get<double>() > 0.8);
    REQUIRE(fs::exists(out / "stage1" / "importance.csv"));
    REQUIRE(fs::exists(out / "stage1_manifest.json"));
    const auto manifest = nlohmann::json::parse(io::read_text_file(out / "stage1_manifest.json"));
    REQUIRE(manifest["subcommand"] == "stage1");
    REQUIRE(manifest["config_hash"] == config::config_hash(cfg));

    const auto render_metrics = pipeline::run_render(cfg);
    REQUIRE(render_metrics["rendered"] == 6);
    REQUIRE(fs::exists(out / "render"));
    REQUIRE(pipeline::run_report(cfg).contains("stage1"));
}

#ifdef POLARPATH_CLI_PATH

TEST_CASE("cli rejects missing and unknown subcommands") {
    REQUIRE(run_cli("") != 0);
    REQUIRE(run_cli("frobnicate") != 0);
}

TEST_CASE("cli maps validation failures to exit code 1") {
    const auto out = fresh_dir("polarpath_cli_val");
    // stage2 without any artifacts: a MissingArtifact, so exit 1.
    REQUIRE(run_cli("stage2 --out " + (out / "none").string()) == 1);
    // Unknown config key: InvalidArgument, so exit 1.
    io::write_text_file(out / "bad.json", R"({"bogus": 1})");
    REQUIRE(run_cli("gen --config " + (out / "bad.json").string()) == 1);
}

TEST_CASE("cli gen succeeds end to end on a tiny corpus") {
    const auto out = fresh_dir("polarpath_cli_gen");
    io::write_text_file(out / "cfg.json",
                        R"({"data": {"malignant_count": 2, "benign_count": 2, "borderline_count": 2,
                            "height": 48, "width": 48}})");
    REQUIRE(run_cli("gen --config " + (out / "cfg.json").string() + " --out " +
                    (out / "run").string()) == 0);
    REQUIRE(fs::exists(out / "run" / "corpus" / "corpus.json"));
    REQUIRE(fs::exists(out / "run" / "gen_manifest.json"));
}

#endif  // POLARPATH_CLI_PATH
