#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchfit/fit.hpp"
#include "patchfit/metrics.hpp"
#include "patchfit/ply.hpp"

namespace patchfit {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw ConfigError("config: bad numeric value '" + v + "' for key '" + key + "'");
    }
}

inline int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        int64_t d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw ConfigError("config: bad integer value '" + v + "' for key '" + key + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean value '" + v + "' for key '" + key + "'");
}

}  // namespace detail

// INI-style sections with key = value lines; '#' and ';' start comments.
// Unknown sections or keys are errors so typos never silently change a run.
inline FitConfig parse_fit_config(std::istream& is) {
    FitConfig cfg;
    std::string line, section = "fit";
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find_first_of("#;"); h != std::string::npos) line.resize(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: malformed section at line " + std::to_string(lineno));
            section = line.substr(1, line.size() - 2);
            if (section != "fit" && section != "weights" && section != "consistency" &&
                section != "margin")
                throw ConfigError("config: unknown section [" + section + "]");
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        auto i = [&] { return static_cast<int>(detail::parse_int(val, key)); };
        auto d = [&] { return detail::parse_double(val, key); };
        bool known = true;
        if (section == "fit") {
            if (key == "patch_count") cfg.patch_count = i();
            else if (key == "samples_per_patch") cfg.samples_per_patch = i();
            else if (key == "margin_count") cfg.margin_count = i();
            else if (key == "total_iters") cfg.total_iters = i();
            else if (key == "pretrain_iters") cfg.pretrain_iters = i();
            else if (key == "learning_rate") cfg.learning_rate = d();
            else if (key == "beta1") cfg.beta1 = d();
            else if (key == "beta2") cfg.beta2 = d();
            else if (key == "epsilon") cfg.epsilon = d();
            else if (key == "eval_every") cfg.eval_every = i();
            else if (key == "seed") cfg.seed = static_cast<uint64_t>(detail::parse_int(val, key));
            else if (key == "variant") cfg.variant = parse_variant(val);
            else if (key == "hidden_width") cfg.hidden_width = i();
            else if (key == "latent_dim") cfg.latent_dim = i();
            else if (key == "rebuild_every") cfg.rebuild_every = i();
            else if (key == "eval_grid") cfg.eval_grid = i();
            else known = false;
        } else if (section == "weights") {
            if (key == "alpha_E") cfg.weights.alpha_E = d();
            else if (key == "alpha_G") cfg.weights.alpha_G = d();
            else if (key == "alpha_sk") cfg.weights.alpha_sk = d();
            else if (key == "alpha_ol") cfg.weights.alpha_ol = d();
            else if (key == "alpha_sc") cfg.weights.alpha_sc = d();
            else if (key == "alpha_st") cfg.weights.alpha_st = d();
            else known = false;
        } else if (section == "consistency") {
            if (key == "normal_mode") {
                if (val == "analytic") cfg.consistency.normal_mode = NormalMode::Analytic;
                else if (val == "approximate")
                    cfg.consistency.normal_mode = NormalMode::Approximate;
                else throw ConfigError("config: normal_mode must be analytic|approximate");
            } else if (key == "grad_through_global") {
                cfg.consistency.grad_through_global = detail::parse_bool(val, key);
            } else if (key == "n") {
                cfg.consistency.neighbor_cfg.n = i();
            } else if (key == "theta_deg") {
                cfg.consistency.neighbor_cfg.theta_deg = d();
            } else known = false;
        } else {  // margin
            if (key == "r") cfg.margin.r = d();
            else known = false;
        }
        if (!known)
            throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
    }
    return cfg;
}

inline FitConfig parse_fit_config(const std::string& text) {
    std::istringstream is(text);
    return parse_fit_config(is);
}

inline FitConfig load_fit_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    return parse_fit_config(is);
}

inline std::string serialize_fit_config(const FitConfig& cfg) {
    using detail::fmt_g17;
    std::ostringstream os;
    os << "[fit]\n"
       << "patch_count = " << cfg.patch_count << "\n"
       << "samples_per_patch = " << cfg.samples_per_patch << "\n"
       << "margin_count = " << cfg.margin_count << "\n"
       << "total_iters = " << cfg.total_iters << "\n"
       << "pretrain_iters = " << cfg.pretrain_iters << "\n"
       << "learning_rate = " << fmt_g17(cfg.learning_rate) << "\n"
       << "beta1 = " << fmt_g17(cfg.beta1) << "\n"
       << "beta2 = " << fmt_g17(cfg.beta2) << "\n"
       << "epsilon = " << fmt_g17(cfg.epsilon) << "\n"
       << "eval_every = " << cfg.eval_every << "\n"
       << "seed = " << cfg.seed << "\n"
       << "variant = " << to_string(cfg.variant) << "\n"
       << "hidden_width = " << cfg.hidden_width << "\n"
       << "latent_dim = " << cfg.latent_dim << "\n"
       << "rebuild_every = " << cfg.rebuild_every << "\n"
       << "eval_grid = " << cfg.eval_grid << "\n"
       << "\n[weights]\n"
       << "alpha_E = " << fmt_g17(cfg.weights.alpha_E) << "\n"
       << "alpha_G = " << fmt_g17(cfg.weights.alpha_G) << "\n"
       << "alpha_sk = " << fmt_g17(cfg.weights.alpha_sk) << "\n"
       << "alpha_ol = " << fmt_g17(cfg.weights.alpha_ol) << "\n"
       << "alpha_sc = " << fmt_g17(cfg.weights.alpha_sc) << "\n"
       << "alpha_st = " << fmt_g17(cfg.weights.alpha_st) << "\n"
       << "\n[consistency]\n"
       << "normal_mode = "
       << (cfg.consistency.normal_mode == NormalMode::Analytic ? "analytic" : "approximate")
       << "\n"
       << "grad_through_global = " << (cfg.consistency.grad_through_global ? "true" : "false")
       << "\n"
       << "n = " << cfg.consistency.neighbor_cfg.n << "\n"
       << "theta_deg = " << fmt_g17(cfg.consistency.neighbor_cfg.theta_deg) << "\n"
       << "\n[margin]\n"
       << "r = " << fmt_g17(cfg.margin.r) << "\n";
    return os.str();
}

// --- atlas persistence ---------------------------------------------------------

inline constexpr char kAtlasMagic[8] = {'P', 'F', 'A', 'T', 'L', 'A', 'S', '1'};
inline constexpr uint8_t kActivationSoftplus = 0;

inline void save_atlas(const std::string& path, const Atlas& atlas) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("save_atlas: cannot open " + path);
    os.write(kAtlasMagic, 8);
    int32_t dims[3] = {atlas.arch.patch_count, atlas.arch.hidden, atlas.arch.latent_dim};
    os.write(reinterpret_cast<const char*>(dims), sizeof dims);
    os.write(reinterpret_cast<const char*>(&kActivationSoftplus), 1);
    int64_t n = static_cast<int64_t>(atlas.params.size());
    os.write(reinterpret_cast<const char*>(&n), sizeof n);
    os.write(reinterpret_cast<const char*>(atlas.params.data()),
             static_cast<std::streamsize>(atlas.params.size() * 8));
    if (!os) throw ConfigError("save_atlas: write failed for " + path);
}

inline Atlas load_atlas(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("load_atlas: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kAtlasMagic, 8) != 0)
        throw ConfigError("load_atlas: bad magic in " + path);
    int32_t dims[3];
    uint8_t act;
    int64_t n;
    is.read(reinterpret_cast<char*>(dims), sizeof dims);
    is.read(reinterpret_cast<char*>(&act), 1);
    is.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!is) throw ConfigError("load_atlas: truncated header in " + path);
    if (act != kActivationSoftplus)
        throw ConfigError("load_atlas: unsupported activation tag in " + path);
    Atlas atlas;
    atlas.arch = AtlasArch{dims[0], dims[1], dims[2]};
    int64_t expect = static_cast<int64_t>(atlas_param_count(atlas.arch));
    if (n != expect)
        throw ConfigError("load_atlas: parameter count mismatch in " + path + " (stored " +
                          std::to_string(n) + ", layout needs " + std::to_string(expect) + ")");
    atlas.params.resize(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(atlas.params.data()), static_cast<std::streamsize>(n * 8));
    if (!is) throw ConfigError("load_atlas: truncated payload in " + path);
    return atlas;
}

// --- run artifacts ----------------------------------------------------------------

inline std::string history_tsv(const std::vector<IterationRecord>& history) {
    using detail::fmt_g17;
    std::ostringstream os;
    os << "iter\tchd\tl_E\tl_G\tl_sk\tl_ol\tl_sc\tl_st\ttotal\n";
    for (const auto& r : history) {
        const LossBreakdown& b = r.loss;
        os << r.iter << "\t" << fmt_g17(b.chd) << "\t" << fmt_g17(b.l_E) << "\t"
           << fmt_g17(b.l_G) << "\t" << fmt_g17(b.l_sk) << "\t" << fmt_g17(b.l_ol) << "\t"
           << fmt_g17(b.l_sc) << "\t" << fmt_g17(b.l_st) << "\t" << fmt_g17(b.total) << "\n";
    }
    return os.str();
}

inline std::string report_text(const MetricsReport& rep) {
    using detail::fmt_g17;
    std::ostringstream os;
    os << "cd = " << fmt_g17(rep.cd) << "\n"
       << "m_ae = " << fmt_g17(rep.m_ae) << "\n";
    if (rep.m_s) os << "m_s = " << fmt_g17(*rep.m_s) << "\n";
    os << "m_olap = " << fmt_g17(rep.m_olap) << "\n"
       << "skipped_normals = " << rep.skipped_normals << "\n";
    for (size_t k = 0; k < rep.per_patch.size(); ++k)
        os << "patch" << k << " = area " << fmt_g17(rep.per_patch[k].area) << ", margin_error "
           << fmt_g17(rep.per_patch[k].margin_error) << ", fallbacks "
           << rep.per_patch[k].fallback_count << "\n";
    // machine-readable row
    os << "metrics\t" << fmt_g17(rep.cd) << "\t" << fmt_g17(rep.m_ae) << "\t"
       << (rep.m_s ? fmt_g17(*rep.m_s) : "nan") << "\t" << fmt_g17(rep.m_olap) << "\n";
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("write_text: cannot open " + path);
    os << text;
    if (!os) throw ConfigError("write_text: write failed for " + path);
}

inline std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("read_text: cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// The manifest holds everything needed to replay a run bit-exactly: tool
// version, input/output paths, and the full config (seed included).
inline std::string make_manifest(const std::string& input, const std::string& output,
                                 const FitConfig& cfg) {
    std::ostringstream os;
    os << "# " << kToolVersion << " run manifest\n"
       << "# input = " << input << "\n"
       << "# output = " << output << "\n"
       << serialize_fit_config(cfg);
    return os.str();
}

}  // namespace patchfit
