// polarpath: three-stage weakly-supervised classification pipeline for
// synthetic polarimetric slides.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "polarpath/pipeline.hpp"

namespace {

int dispatch(const std::string& subcommand, const nlohmann::json& cfg) {
    using namespace polarpath;
    if (subcommand == "gen") pipeline::run_gen(cfg);
    else if (subcommand == "stage1") pipeline::run_stage1(cfg);
    else if (subcommand == "stage2") pipeline::run_stage2(cfg);
    else if (subcommand == "stage3") pipeline::run_stage3(cfg);
    else if (subcommand == "pipeline") pipeline::run_pipeline(cfg);
    else if (subcommand == "noise-exp") pipeline::run_noise_exp(cfg);
    else if (subcommand == "render") pipeline::run_render(cfg);
    else if (subcommand == "report") pipeline::run_report(cfg);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"polarpath: polarimetric slide classification pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    long long seed = -1;
    std::string cl_mode;
    bool paper_scale = false;
    app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out_dir, "override the output directory");
    app.add_option("--cl", cl_mode, "confidence learning on|off")
        ->check(CLI::IsMember({"on", "off"}));
    app.add_flag("--paper-scale", paper_scale, "use 224-pixel patches and 1024-wide embeddings");

    for (const char* name : {"gen", "stage1", "stage2", "stage3", "pipeline", "noise-exp", "render", "report"})
        app.add_subcommand(name)->fallthrough();  // options may follow the subcommand

    CLI11_PARSE(app, argc, argv);
    const std::string subcommand = app.get_subcommands().front()->get_name();

    try {
        auto cfg = polarpath::config::load_config(config_path);
        if (seed >= 0) cfg["seed"] = static_cast<uint64_t>(seed);
        if (!out_dir.empty()) cfg["output_dir"] = out_dir;
        if (!cl_mode.empty()) cfg["stage1"]["confidence_learning"] = cl_mode == "on";
        if (paper_scale) polarpath::config::apply_paper_scale(cfg);
        polarpath::config::validate_config(cfg);
        return dispatch(subcommand, cfg);
    } catch (const polarpath::pipeline::MissingArtifact& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const polarpath::InvalidArgument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const polarpath::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 2;
    }
}
