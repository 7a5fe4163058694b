#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patchfit/config.hpp"
#include "patchfit/fit.hpp"
#include "patchfit/objexport.hpp"
#include "patchfit/ply.hpp"
#include "patchfit/shapes.hpp"

namespace fs = std::filesystem;
using namespace patchfit;

namespace {

struct GlobalOpts {
    int64_t seed = -1;  // -1: keep config/default seed
    int threads = 1;
    bool verbose = false;
};

void apply_globals(FitConfig& cfg, const GlobalOpts& g) {
    if (g.seed >= 0) cfg.seed = static_cast<uint64_t>(g.seed);
}

std::string report_with_patch_summary(const MetricsReport& rep) { return report_text(rep); }

void write_run_artifacts(const std::string& out_dir, const std::string& input,
                         const FitConfig& cfg, const Atlas& atlas,
                         const std::vector<IterationRecord>& history,
                         const MetricsReport& report, const std::string& tag = "") {
    fs::create_directories(out_dir);
    std::string p = out_dir + "/" + (tag.empty() ? "" : tag + ".");
    save_atlas(p + "atlas.bin", atlas);
    write_text(p + "history.tsv", history_tsv(history));
    write_text(p + "report.txt", report_with_patch_summary(report));
    write_text(p + "manifest.ini", make_manifest(input, out_dir, cfg));
    PredictedCloud cloud = build_eval_cloud(atlas, cfg.eval_grid);
    write_pointcloud(p + "pred.ply", cloud);
}

int run_gen(const std::string& shape, int count, double noise, uint64_t seed, double size,
            double major, double minor, double hole_radius, double gap, bool do_normalize,
            bool ascii, const std::string& out, bool verbose) {
    ShapeSpec spec;
    spec.kind = parse_shape_kind(shape);
    spec.count = count;
    spec.noise = noise;
    spec.seed = seed;
    spec.size = size;
    spec.major = major;
    spec.minor = minor;
    spec.hole_radius = hole_radius;
    spec.gap = gap;
    GroundTruthCloud cloud = gen_shape(spec);
    if (do_normalize) cloud = normalize(cloud).first;
    write_pointcloud(out, cloud, !ascii);
    if (verbose)
        std::cerr << "gen: wrote " << cloud.points.size() << " points (area "
                  << cloud.area << ") to " << out << "\n";
    return 0;
}

int run_fit(const std::string& input, const std::string& config_path,
            const std::string& out_dir, const std::string& variant_override,
            int iters_override, const GlobalOpts& g) {
    FitConfig cfg;
    if (!config_path.empty()) cfg = load_fit_config(config_path);
    if (!variant_override.empty()) cfg.variant = parse_variant(variant_override);
    if (iters_override > 0) cfg.total_iters = iters_override;
    apply_globals(cfg, g);
    cfg.validate();

    PlyReadInfo info;
    GroundTruthCloud gt = read_pointcloud(input, &info);
    if (!info.warning.empty()) std::cerr << "warning: " << info.warning << "\n";
    if (!info.had_area)
        std::cerr << "warning: no area in " << input << "; using density estimate "
                  << gt.area << "\n";

    FitSession session(gt, cfg);
    while (session.iteration() < cfg.total_iters) {
        session.step();
        const IterationRecord& r = session.history().back();
        if (g.verbose)
            std::fprintf(stderr, "iter %d  total %.6g  chd %.6g  wall %.1f ms\n", r.iter,
                         r.loss.total, r.loss.chd, r.wall_ms);
        else if (r.iter % cfg.eval_every == 0)
            std::fprintf(stderr, "iter %d / %d  total %.6g\n", r.iter, cfg.total_iters,
                         r.loss.total);
    }
    MetricsReport rep = session.evaluate_now();
    write_run_artifacts(out_dir, input, cfg, session.atlas(), session.history(), rep);
    std::cout << report_text(rep);
    return 0;
}

int run_eval(const std::string& input, const std::string& atlas_path, int grid,
             const std::string& out, const GlobalOpts& g) {
    GroundTruthCloud gt = read_pointcloud(input);
    Atlas atlas = load_atlas(atlas_path);
    FitConfig cfg;
    cfg.patch_count = atlas.arch.patch_count;
    cfg.hidden_width = atlas.arch.hidden;
    cfg.latent_dim = atlas.arch.latent_dim;
    cfg.eval_grid = grid;
    apply_globals(cfg, g);
    MetricsReport rep = evaluate(atlas, gt, cfg);
    std::string text = report_text(rep);
    if (!out.empty()) write_text(out, text);
    std::cout << text;
    return 0;
}

int run_export(const std::string& atlas_path, const std::string& out, int grid,
               bool verbose) {
    Atlas atlas = load_atlas(atlas_path);
    auto stats = export_obj(out, atlas, grid);
    if (verbose)
        for (size_t k = 0; k < stats.quads_per_patch.size(); ++k)
            std::cerr << "patch " << k << ": " << stats.vertices_per_patch[k]
                      << " vertices, " << stats.quads_per_patch[k] << " quads\n";
    return 0;
}

int run_ablate(const std::string& input, const std::string& config_path,
               const std::string& variants_csv, const std::string& out_dir,
               const GlobalOpts& g) {
    FitConfig cfg;
    if (!config_path.empty()) cfg = load_fit_config(config_path);
    apply_globals(cfg, g);

    std::vector<Variant> variants;
    std::stringstream ss(variants_csv);
    for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) variants.push_back(parse_variant(tok));
    if (variants.empty()) throw FitError("ablate: no variants given");
    cfg.variant = variants.front();
    cfg.validate();

    GroundTruthCloud gt = read_pointcloud(input);
    FitSession base(gt, cfg);
    base.run_to(cfg.effective_pretrain());
    if (g.verbose)
        std::cerr << "ablate: pretrained " << cfg.effective_pretrain() << " iterations\n";

    fs::create_directories(out_dir);
    std::ostringstream summary;
    summary << "variant\tcd\tm_ae\tm_s\tm_olap\n";
    for (Variant v : variants) {
        FitSession branch = base;  // same pretrained state for every variant
        branch.set_variant(v);
        branch.run_to(cfg.total_iters);
        MetricsReport rep = branch.evaluate_now();
        FitConfig vcfg = cfg;
        vcfg.variant = v;
        write_run_artifacts(out_dir, input, vcfg, branch.atlas(), branch.history(), rep,
                            to_string(v));
        summary << to_string(v) << "\t" << rep.cd << "\t" << rep.m_ae << "\t"
                << (rep.m_s ? *rep.m_s : std::nan("")) << "\t" << rep.m_olap << "\n";
        if (g.verbose) std::cerr << "ablate: finished " << to_string(v) << "\n";
    }
    write_text(out_dir + "/summary.tsv", summary.str());
    std::cout << summary.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchfit: fit an atlas of parametric patches to a point cloud"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "override RNG seed");
    app.add_option("--threads", g.threads, "worker threads (results are thread-invariant)")
        ->check(CLI::PositiveNumber);
    app.add_flag("--verbose", g.verbose, "per-iteration logging");

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic point cloud");
    gen->fallthrough();
    std::string shape = "sphere", gen_out;
    int count = 2000;
    double noise = 0.0, size = 1.0, major = 1.0, minor = 0.3, hole_radius = 0.25, gap = 0.05;
    bool do_normalize = false, ascii = false;
    gen->add_option("--shape", shape, "plane|sphere|torus|box|plane-with-hole|two-sheets");
    gen->add_option("--count", count, "number of points")->check(CLI::PositiveNumber);
    gen->add_option("--noise", noise, "gaussian noise sigma along the normal");
    gen->add_option("--size", size, "plane/box/sheet edge length or sphere radius");
    gen->add_option("--major", major, "torus major radius");
    gen->add_option("--minor", minor, "torus minor radius");
    gen->add_option("--hole-radius", hole_radius, "hole radius for plane_with_hole");
    gen->add_option("--gap", gap, "sheet separation for two_sheets");
    gen->add_flag("--normalize", do_normalize, "center and scale into the unit cube");
    gen->add_flag("--ascii", ascii, "write ASCII PLY instead of binary");
    gen->add_option("--out", gen_out, "output PLY path")->required();

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "fit an atlas to a point cloud");
    fit_cmd->fallthrough();
    std::string fit_input, fit_config, fit_out, fit_variant;
    int fit_iters = 0;
    fit_cmd->add_option("--input", fit_input, "input PLY")->required();
    fit_cmd->add_option("--config", fit_config, "INI config file");
    fit_cmd->add_option("--variant", fit_variant, "training variant override");
    fit_cmd->add_option("--iters", fit_iters, "total iteration override");
    fit_cmd->add_option("--out", fit_out, "output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved atlas against a cloud");
    eval_cmd->fallthrough();
    std::string eval_input, eval_atlas, eval_out;
    int eval_grid = 32;
    eval_cmd->add_option("--input", eval_input, "input PLY")->required();
    eval_cmd->add_option("--atlas", eval_atlas, "saved atlas")->required();
    eval_cmd->add_option("--grid", eval_grid, "eval grid resolution per patch");
    eval_cmd->add_option("--out", eval_out, "write the report here too");

    // export
    auto* export_cmd = app.add_subcommand("export", "export a saved atlas as OBJ meshes");
    export_cmd->fallthrough();
    std::string export_atlas, export_out;
    int export_grid = 32;
    export_cmd->add_option("--atlas", export_atlas, "saved atlas")->required();
    export_cmd->add_option("--grid", export_grid, "mesh grid resolution per patch");
    export_cmd->add_option("--out", export_out, "output OBJ path")->required();

    // ablate
    auto* ablate_cmd =
        app.add_subcommand("ablate", "branch variants from one pretrained state");
    ablate_cmd->fallthrough();
    std::string ab_input, ab_config, ab_variants = "dsp,analyt,analyt+stitch", ab_out;
    ablate_cmd->add_option("--input", ab_input, "input PLY")->required();
    ablate_cmd->add_option("--config", ab_config, "INI config file");
    ablate_cmd->add_option("--variants", ab_variants, "comma-separated variant list");
    ablate_cmd->add_option("--out", ab_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage problems exit with 2
    }

    try {
        if (gen->parsed())
            return run_gen(shape, count, noise,
                           g.seed >= 0 ? static_cast<uint64_t>(g.seed) : 0, size, major,
                           minor, hole_radius, gap, do_normalize, ascii, gen_out, g.verbose);
        if (fit_cmd->parsed())
            return run_fit(fit_input, fit_config, fit_out, fit_variant, fit_iters, g);
        if (eval_cmd->parsed()) return run_eval(eval_input, eval_atlas, eval_grid, eval_out, g);
        if (export_cmd->parsed())
            return run_export(export_atlas, export_out, export_grid, g.verbose);
        if (ablate_cmd->parsed()) return run_ablate(ab_input, ab_config, ab_variants, ab_out, g);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
