// crowdsplat command-line front end.
//
// Exit codes: 0 success, 2 validation error, 3 runtime error. On failure an
// error.json is written next to the outputs when --out is known.

#include "crowdsplat/fs_util.hpp"
#include "crowdsplat/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crowdsplat;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config, "JSON config file");
    if (config_required) c->required();
    cmd->add_option("--seed", opts.seed, "Override the config seed");
    cmd->add_option("--out", opts.out, "Output directory")->required();
    cmd->add_option("--threads", opts.threads, "Worker threads (default: $CROWDSPLAT_THREADS or 1)");
}

int effective_threads(int cli) {
    if (cli > 0) return cli;
    if (const char* env = std::getenv("CROWDSPLAT_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v > 0) return v;
        } catch (const std::exception&) {
        }
        spdlog::warn("ignoring CROWDSPLAT_THREADS='{}'", env);
    }
    return 1;
}

json load_config(const CommonOptions& opts) {
    json doc = opts.config.empty() ? json::object() : read_json(opts.config);
    if (!doc.is_object()) throw ValidationError(opts.config + ": config must be a JSON object");
    if (opts.seed) doc["seed"] = *opts.seed;
    return doc;
}

fs::path base_dir(const CommonOptions& opts) {
    return opts.config.empty() ? fs::path{} : fs::path(opts.config).parent_path();
}

void write_error(const std::string& out, const std::string& kind, const std::string& message) {
    if (out.empty()) return;
    try {
        write_json(fs::path(out) / "error.json",
                   {{"version", kManifestVersion}, {"status", "error"}, {"kind", kind}, {"message", message}});
    } catch (const std::exception&) {
    }
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("crowdsplat"));
    spdlog::set_pattern("[%l] %v");

    CLI::App app{"Crowd-scene Gaussian splatting toolkit"};
    app.require_subcommand(1);

    CommonOptions build_opts, occ_opts, pairs_opts, refine_opts, eval_opts;
    auto* build = app.add_subcommand("build-scene", "Skin body models and write Gaussian PLYs + scene manifest");
    add_common(build, build_opts);
    auto* occ = app.add_subcommand("make-occlusion-pairs", "Render persons and synthesize occlusion masks");
    add_common(occ, occ_opts);
    auto* pairs = app.add_subcommand("make-refiner-pairs", "Render coarse/gt/normal triplets on a hemisphere");
    add_common(pairs, pairs_opts);
    auto* refine = app.add_subcommand("refine", "Cluster persons, refine views and distill into the Gaussians");
    add_common(refine, refine_opts);
    auto* eval = app.add_subcommand("eval", "Compare two directories of equally named PNGs");
    add_common(eval, eval_opts, false);
    std::string eval_a, eval_b;
    eval->add_option("--a", eval_a, "First image directory");
    eval->add_option("--b", eval_b, "Second image directory");
    auto* toy = app.add_subcommand("export-toy-model", "Write the built-in toy body model as JSON");
    std::string toy_out;
    toy->add_option("--out", toy_out, "Output JSON path")->required();
    toy->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Bad usage is a validation error; --help exits 0.
        return app.exit(e) == 0 ? 0 : 2;
    }

    std::string out;
    try {
        if (*build) {
            out = build_opts.out;
            const json doc = load_config(build_opts);
            const SceneConfig cfg = SceneConfig::from_json(doc, base_dir(build_opts));
            write_built_scene(out, build_scene(cfg), cfg.to_json());
        } else if (*occ) {
            out = occ_opts.out;
            const auto cfg = OcclusionPairsConfig::from_json(load_config(occ_opts), base_dir(occ_opts));
            const json m = make_occlusion_pairs(cfg, out, effective_threads(occ_opts.threads));
            spdlog::info("wrote {} occlusion samples", m["entries"].size());
        } else if (*pairs) {
            out = pairs_opts.out;
            const auto cfg = RefinerPairsConfig::from_json(load_config(pairs_opts), base_dir(pairs_opts));
            const json m = make_refiner_pairs(cfg, out, effective_threads(pairs_opts.threads));
            spdlog::info("wrote {} refiner pairs ({} train / {} test scenes)", m["entries"].size(),
                         m["split"]["train"].get<int>(), m["split"]["test"].get<int>());
        } else if (*refine) {
            out = refine_opts.out;
            json doc = load_config(refine_opts);
            if (refine_opts.seed) doc["optim"]["seed"] = *refine_opts.seed;
            doc.erase("seed");
            const auto cfg = RefineConfig::from_json(doc, base_dir(refine_opts));
            const json report = refine_command(cfg, out, effective_threads(refine_opts.threads));
            if (report["status"] != "ok") return 3;
        } else if (*eval) {
            out = eval_opts.out;
            const json doc = load_config(eval_opts);
            const fs::path dir = base_dir(eval_opts);
            const fs::path a = !eval_a.empty() ? fs::path(eval_a) : dir / doc.at("a").get<std::string>();
            const fs::path b = !eval_b.empty() ? fs::path(eval_b) : dir / doc.at("b").get<std::string>();
            const std::uint64_t seed = doc.value("seed", std::uint64_t{0});
            const EvalResult r = eval_command(a, b, seed);
            json j = r.to_json(seed);
            j["config"] = {{"a", a.string()}, {"b", b.string()}, {"seed", seed}};
            write_json(fs::path(out) / "metrics.json", j);
            write_text_file(fs::path(out) / "metrics.txt", r.to_text());
            std::cout << r.to_text();
        } else if (*toy) {
            write_json(toy_out, body_model_to_json(make_toy_body_model()));
        }
    } catch (const ValidationError& e) {
        spdlog::error("{}", e.what());
        write_error(out, "validation", e.what());
        return 2;
    } catch (const json::exception& e) {
        spdlog::error("{}", e.what());
        write_error(out, "validation", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        write_error(out, "runtime", e.what());
        return 3;
    }
    return 0;
}
