#include "bpxnn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

namespace bpxnn {

namespace fs = std::filesystem;

// ---- enum helpers ----------------------------------------------------------

const char* precond_name(Precond p) {
    switch (p) {
        case Precond::none: return "none";
        case Precond::frame_unstable: return "frame_unstable";
        case Precond::frame_stable: return "frame_stable";
    }
    return "?";
}

Precond parse_precond(std::string_view s) {
    if (s == "none") return Precond::none;
    if (s == "frame_unstable") return Precond::frame_unstable;
    if (s == "frame_stable") return Precond::frame_stable;
    throw std::invalid_argument("unknown preconditioning: " + std::string(s));
}

const char* opt_name(OptKind k) {
    switch (k) {
        case OptKind::sgd: return "sgd";
        case OptKind::adam: return "adam";
        case OptKind::lbfgs: return "lbfgs";
        case OptKind::ngd: return "ngd";
    }
    return "?";
}

OptKind parse_opt(std::string_view s) {
    if (s == "sgd") return OptKind::sgd;
    if (s == "adam") return OptKind::adam;
    if (s == "lbfgs") return OptKind::lbfgs;
    if (s == "ngd") return OptKind::ngd;
    throw std::invalid_argument("unknown optimizer: " + std::string(s));
}

const char* formulation_name(Formulation f) { return f == Formulation::fosls ? "fosls" : "energy"; }

Formulation parse_formulation(std::string_view s) {
    if (s == "fosls") return Formulation::fosls;
    if (s == "energy") return Formulation::energy;
    throw std::invalid_argument("unknown formulation: " + std::string(s));
}

// ---- config parsing ----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: bad numeric value for '" + key + "': " + v);
    }
}

long long to_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: bad integer value for '" + key + "': " + v);
    }
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument("config: malformed section at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            if (section != "experiment" && section != "optimizer")
                throw std::invalid_argument("config: unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (section == "experiment") {
            if (key == "formulation") cfg.formulation = parse_formulation(val);
            else if (key == "preconditioning") cfg.precond = parse_precond(val);
            else if (key == "architecture") cfg.arch = parse_arch(val);
            else if (key == "levels") cfg.J = static_cast<int>(to_int(val, key));
            else if (key == "precision") cfg.precision = parse_kind(val);
            else if (key == "epochs") cfg.epochs = static_cast<int>(to_int(val, key));
            else if (key == "train_samples") cfg.k_train = static_cast<int>(to_int(val, key));
            else if (key == "test_samples") cfg.n_test = static_cast<int>(to_int(val, key));
            else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(val, key));
            else if (key == "metric_every") cfg.metric_every = static_cast<int>(to_int(val, key));
            else if (key == "threads") cfg.threads = static_cast<int>(to_int(val, key));
            else if (key == "output_dir") cfg.output_dir = val;
            else throw std::invalid_argument("config: unknown key '" + key + "' in [experiment]");
        } else if (section == "optimizer") {
            if (key == "kind") cfg.optim.kind = parse_opt(val);
            else if (key == "lr0") cfg.optim.lr0 = to_double(val, key);
            else if (key == "lr_min") cfg.optim.lr_min = to_double(val, key);
            else if (key == "t_max") cfg.optim.t_max = static_cast<int>(to_int(val, key));
            else if (key == "adam_eps") cfg.optim.adam_eps = to_double(val, key);
            else if (key == "beta1") cfg.optim.beta1 = to_double(val, key);
            else if (key == "beta2") cfg.optim.beta2 = to_double(val, key);
            else if (key == "lbfgs_history") cfg.optim.lbfgs_history = static_cast<int>(to_int(val, key));
            else if (key == "lbfgs_tol") cfg.optim.lbfgs_tol = to_double(val, key);
            else if (key == "ngd_eps") cfg.optim.ngd_eps = to_double(val, key);
            else if (key == "ngd_cg_tol") cfg.optim.ngd_cg_tol = to_double(val, key);
            else if (key == "ngd_cg_max") cfg.optim.ngd_cg_max = static_cast<int>(to_int(val, key));
            else if (key == "loss_scale") cfg.optim.loss_scale = to_double(val, key);
            else throw std::invalid_argument("config: unknown key '" + key + "' in [optimizer]");
        } else {
            throw std::invalid_argument("config: key outside any section at line " + std::to_string(lineno));
        }
    }
    if (cfg.epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (cfg.k_train < 1 || cfg.n_test < 1) throw std::invalid_argument("config: sample counts must be positive");
    if (cfg.J < 1 || cfg.J > 16) throw std::invalid_argument("config: levels out of range");
    if (cfg.precond == Precond::none && cfg.arch != ArchKind::full)
        throw std::invalid_argument("config: preconditioning = none requires architecture = full");
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---- sampling and metrics -----------------------------------------------------

std::vector<std::array<double, 4>> sample_parameters(int count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::array<double, 4>> out(static_cast<std::size_t>(count));
    for (auto& y : out)
        for (auto& v : y) v = rng.uniform(0.5, 1.5);
    return out;
}

MreMse compute_mre_mse(const std::vector<std::vector<double>>& predictions,
                       const std::vector<std::vector<double>>& references) {
    if (predictions.size() != references.size()) throw std::invalid_argument("compute_mre_mse: case count mismatch");
    MreMse out;
    int used = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        const auto& r = references[i];
        if (p.size() != r.size()) throw std::invalid_argument("compute_mre_mse: dimension mismatch");
        double d2 = 0.0, r2 = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double d = p[k] - r[k];
            d2 += d * d;
            r2 += r[k] * r[k];
        }
        if (r2 == 0.0) {
            ++out.excluded;
            std::fprintf(stderr, "warning: reference with zero norm excluded from MRE/MSE\n");
            continue;
        }
        out.mre += std::sqrt(d2 / r2);
        out.mse += d2;
        ++used;
    }
    if (used > 0) {
        out.mre /= used;
        out.mse /= used;
    }
    return out;
}

std::vector<double> sample_frame_unit_vector(const FrameDescriptor& u_desc, const FrameDescriptor* s_desc, Rng& rng) {
    const std::size_t total = u_desc.total_size + (s_desc ? s_desc->total_size : 0);
    std::vector<double> w(total, 0.0);
    const FrameDescriptor* descs[2] = {&u_desc, s_desc};
    std::size_t base = 0;
    for (int f = 0; f < 2; ++f) {
        if (!descs[f]) continue;
        const auto& d = *descs[f];
        for (int j = 1; j <= d.J; ++j) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(d.level_size(j)));
            for (std::size_t k = 0; k < d.level_size(j); ++k)
                w[base + d.level_offset(j) + k] = scale * rng.gaussian();
        }
        base += d.total_size;
    }
    double nrm = 0.0;
    for (double v : w) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (auto& v : w) v /= nrm;
    return w;
}

// ---- file helpers ---------------------------------------------------------------

namespace {

void write_text_file(const std::string& path, const std::string& content) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.16e", v);
    return buf;
}

std::string svg_loss_curve(const std::vector<MetricsRecord>& recs) {
    // minimal self-contained line plot: log10 losses against the epoch
    const int W = 720, H = 420, ml = 70, mr = 20, mt = 20, mb = 50;
    double lo = 1e300, hi = -1e300;
    int emax = 1;
    for (const auto& r : recs) {
        for (double v : {r.train_loss, r.test_loss})
            if (v > 0.0 && std::isfinite(v)) {
                lo = std::min(lo, std::log10(v));
                hi = std::max(hi, std::log10(v));
            }
        emax = std::max(emax, r.epoch);
    }
    if (lo > hi) {
        lo = -1;
        hi = 1;
    }
    if (hi - lo < 1e-9) hi = lo + 1.0;
    auto xmap = [&](double e) { return ml + (W - ml - mr) * e / std::max(1, emax); };
    auto ymap = [&](double v) { return mt + (H - mt - mb) * (hi - v) / (hi - lo); };
    std::ostringstream s;
    s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    s << "<rect width='100%' height='100%' fill='white'/>\n";
    s << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb << "' stroke='black'/>\n";
    s << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
      << "' stroke='black'/>\n";
    for (int g = static_cast<int>(std::ceil(lo)); g <= static_cast<int>(std::floor(hi)); ++g) {
        s << "<line x1='" << ml << "' y1='" << ymap(g) << "' x2='" << W - mr << "' y2='" << ymap(g)
          << "' stroke='#dddddd'/>\n";
        s << "<text x='8' y='" << ymap(g) + 4 << "' font-size='12'>1e" << g << "</text>\n";
    }
    s << "<text x='" << (W / 2 - 20) << "' y='" << H - 12 << "' font-size='13'>epoch</text>\n";
    const char* colors[2] = {"#1f77b4", "#d62728"};
    const char* names[2] = {"train", "test"};
    for (int c = 0; c < 2; ++c) {
        s << "<polyline fill='none' stroke='" << colors[c] << "' stroke-width='1.5' points='";
        for (const auto& r : recs) {
            const double v = c == 0 ? r.train_loss : r.test_loss;
            if (!(v > 0.0) || !std::isfinite(v)) continue;
            s << xmap(r.epoch) << "," << ymap(std::log10(v)) << " ";
        }
        s << "'/>\n";
        s << "<text x='" << W - mr - 130 + c * 60 << "' y='" << mt + 14 << "' font-size='12' fill='" << colors[c]
          << "'>" << names[c] << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace

// ---- checkpoints -----------------------------------------------------------------

void save_checkpoint(const std::string& path, const ExperimentConfig& cfg, const std::vector<double>& theta_f64) {
    std::ostringstream s;
    s << "bpxnn-checkpoint v1\n";
    s << "architecture = " << arch_name(cfg.arch) << "\n";
    s << "formulation = " << formulation_name(cfg.formulation) << "\n";
    s << "preconditioning = " << precond_name(cfg.precond) << "\n";
    s << "levels = " << cfg.J << "\n";
    s << "precision = " << kind_name(cfg.precision) << "\n";
    s << "seed = " << cfg.seed << "\n";
    s << "params = " << theta_f64.size() << "\n";
    s << "theta:\n";
    char buf[48];
    for (double v : theta_f64) {
        std::snprintf(buf, sizeof(buf), "%a\n", v);
        s << buf;
    }
    write_text_file(path, s.str());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    Checkpoint ck;
    std::string line;
    if (!std::getline(in, line) || line.rfind("bpxnn-checkpoint", 0) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    ck.version = trim(line.substr(std::strlen("bpxnn-checkpoint")));
    std::size_t params = 0;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line == "theta:") break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "architecture") ck.arch = parse_arch(val);
        else if (key == "formulation") ck.formulation = parse_formulation(val);
        else if (key == "preconditioning") ck.precond = parse_precond(val);
        else if (key == "levels") ck.J = std::stoi(val);
        else if (key == "precision") ck.precision = parse_kind(val);
        else if (key == "seed") ck.seed = std::stoull(val);
        else if (key == "params") params = std::stoull(val);
    }
    ck.theta.reserve(params);
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        ck.theta.push_back(std::strtod(line.c_str(), nullptr));
    }
    if (ck.theta.size() != params) throw std::runtime_error("checkpoint: parameter count mismatch");
    return ck;
}

// ---- training ------------------------------------------------------------------

namespace {

// Everything one precision-typed run needs, shared by the loss, gradient,
// Gramian and metric evaluations.
template <class T>
struct TrainingContext {
    const ExperimentConfig* cfg = nullptr;
    DyadicMesh mesh;
    FrameDescriptor u_desc, s_desc;
    ArchSpec arch;
    std::unique_ptr<FrameOps<T>> u_ops, s_ops;
    std::unique_ptr<Network<T>> net;
    std::unique_ptr<StableOperator<T>> stable;
    std::unique_ptr<NodalTables<T>> nodal;
    std::vector<T> load_stacked;  // energy formulation, stable path
    bool fosls = true;

    std::vector<std::array<double, 4>> y_train, y_test;
    std::vector<FormCy<T>> forms_train;
    // binary64 metric machinery
    std::unique_ptr<FrameOps<double>> u_ops64, s_ops64;
    std::unique_ptr<NodalTables<double>> nodal_raw64;  // energy metric functional
    std::vector<std::vector<double>> refs;             // stacked nodal values

    explicit TrainingContext(const ExperimentConfig& c) : cfg(&c), mesh(build_mesh(c.J)) {
        fosls = c.formulation == Formulation::fosls;
        u_desc = build_frame(Space::H10, c.J);
        if (fosls) s_desc = build_frame(Space::H1, c.J);
        const bool frame_out = c.precond != Precond::none;
        arch = build_architecture(c.arch, c.formulation, u_desc, fosls ? &s_desc : nullptr, frame_out);
        u_ops = std::make_unique<FrameOps<T>>(u_desc);
        if (fosls) s_ops = std::make_unique<FrameOps<T>>(s_desc);
        net = std::make_unique<Network<T>>(arch, u_ops.get(), s_ops.get());
        if (c.precond == Precond::frame_stable)
            stable = std::make_unique<StableOperator<T>>(c.formulation, u_desc, fosls ? &s_desc : nullptr, mesh);
        else
            nodal = std::make_unique<NodalTables<T>>(make_nodal_tables<T>(
                c.formulation, mesh, u_desc, fosls ? &s_desc : nullptr, /*normalized=*/frame_out, 1.0));
        if (!fosls && c.precond == Precond::frame_stable)
            load_stacked = round_vector<T>(energy_load_stacked(mesh, u_desc, 1.0));

        y_train = sample_parameters(c.k_train, Rng::derive(c.seed, 1));
        y_test = sample_parameters(c.n_test, Rng::derive(c.seed, 2));
        forms_train.reserve(y_train.size());
        for (const auto& y : y_train) {
            DiffusionField fld;
            fld.y = y;
            forms_train.push_back(make_form<T>(mesh, fld, 1.0));
        }
        u_ops64 = std::make_unique<FrameOps<double>>(u_desc);
        if (fosls) s_ops64 = std::make_unique<FrameOps<double>>(s_desc);
        if (!fosls)
            nodal_raw64 = std::make_unique<NodalTables<double>>(
                make_nodal_tables<double>(c.formulation, mesh, u_desc, nullptr, /*normalized=*/false, 1.0));
        refs.reserve(y_test.size());
        for (const auto& y : y_test) {
            DiffusionField fld;
            fld.y = y;
            auto [u_fe, s_fe] = solve_reference(fld, c.J);
            std::vector<double> stacked = u_fe;
            if (fosls) stacked.insert(stacked.end(), s_fe.begin(), s_fe.end());
            refs.push_back(std::move(stacked));
        }
    }

    // loss and its gradient w.r.t. the network output for one training sample
    LossValue<T> sample_loss(std::size_t k, const std::vector<T>& out, std::vector<T>* dout,
                             QuadSamples<T>& scratch) const {
        const FormCy<T>& form = forms_train[k];
        switch (cfg->precond) {
            case Precond::frame_stable:
                if (fosls) return fosls_loss_stable<T>(*stable, form, out, dout, scratch);
                return energy_loss_stable<T>(*stable, form, load_stacked, out, dout);
            case Precond::frame_unstable:
                if (fosls) return fosls_loss_unstable<T>(*u_ops, *s_ops, *nodal, form, out, dout);
                return energy_loss_unstable<T>(*u_ops, *nodal, form, out, dout);
            case Precond::none: {
                if (fosls) {
                    std::vector<T> vu(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(nodal->nu));
                    std::vector<T> vs(out.begin() + static_cast<std::ptrdiff_t>(nodal->nu), out.end());
                    std::vector<T> gu, gs;
                    auto res = fosls_loss_nodal<T>(*nodal, form, vu, vs, dout ? &gu : nullptr, dout ? &gs : nullptr);
                    if (dout) {
                        dout->resize(out.size());
                        std::copy(gu.begin(), gu.end(), dout->begin());
                        std::copy(gs.begin(), gs.end(), dout->begin() + static_cast<std::ptrdiff_t>(nodal->nu));
                    }
                    return res;
                }
                return energy_loss_nodal<T>(*nodal, form, out, dout);
            }
        }
        return {};
    }

    // Gauss-Newton metric on the output space: cot = (quadratic form) tangent
    void output_gram(std::size_t k, const std::vector<T>& tangent, std::vector<T>& cot,
                     QuadSamples<T>& scratch) const {
        const FormCy<T>& form = forms_train[k];
        switch (cfg->precond) {
            case Precond::frame_stable:
                form_gram_apply<T>(*stable, form, tangent, cot, scratch);
                return;
            case Precond::frame_unstable: {
                if (fosls) {
                    const std::size_t nuh = u_desc.total_size;
                    std::vector<T> wu(tangent.begin(), tangent.begin() + static_cast<std::ptrdiff_t>(nuh));
                    std::vector<T> ws(tangent.begin() + static_cast<std::ptrdiff_t>(nuh), tangent.end());
                    std::vector<T> vu, vs, gu, gs, au, as;
                    u_ops->synthesize(wu, vu);
                    s_ops->synthesize(ws, vs);
                    nodal_gram_apply<T>(*nodal, form, vu, vs, gu, gs);
                    u_ops->adjoint(gu, au);
                    s_ops->adjoint(gs, as);
                    cot.resize(tangent.size());
                    std::copy(au.begin(), au.end(), cot.begin());
                    std::copy(as.begin(), as.end(), cot.begin() + static_cast<std::ptrdiff_t>(nuh));
                } else {
                    std::vector<T> vu, gu;
                    u_ops->synthesize(tangent, vu);
                    energy_nodal_gram_apply<T>(*nodal, form, vu, gu);
                    u_ops->adjoint(gu, cot);
                }
                return;
            }
            case Precond::none: {
                if (fosls) {
                    std::vector<T> vu(tangent.begin(), tangent.begin() + static_cast<std::ptrdiff_t>(nodal->nu));
                    std::vector<T> vs(tangent.begin() + static_cast<std::ptrdiff_t>(nodal->nu), tangent.end());
                    std::vector<T> gu, gs;
                    nodal_gram_apply<T>(*nodal, form, vu, vs, gu, gs);
                    cot.resize(tangent.size());
                    std::copy(gu.begin(), gu.end(), cot.begin());
                    std::copy(gs.begin(), gs.end(), cot.begin() + static_cast<std::ptrdiff_t>(nodal->nu));
                } else {
                    energy_nodal_gram_apply<T>(*nodal, form, tangent, cot);
                }
                return;
            }
        }
    }

    // prediction as stacked nodal values (binary64)
    std::vector<double> predict_values(const std::vector<T>& theta, std::size_t k) const {
        std::array<T, 4> y_t;
        for (std::size_t i = 0; i < 4; ++i) y_t[i] = from_f64<T>(y_test[k][i]);
        std::vector<T> out_t;
        net->forward(theta, y_t, out_t);
        std::vector<double> out = widen_vector(out_t);
        if (cfg->precond == Precond::none) return out;
        const std::size_t nuh = u_desc.total_size;
        std::vector<double> wu(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(nuh));
        std::vector<double> vu, values;
        u_ops64->synthesize(wu, vu);
        const auto u_vals = finest_coeffs_to_values(u_desc, vu);
        values.assign(u_vals.begin() + 1, u_vals.end() - 1);  // interior nodes
        if (fosls) {
            std::vector<double> ws(out.begin() + static_cast<std::ptrdiff_t>(nuh), out.end());
            std::vector<double> vs;
            s_ops64->synthesize(ws, vs);
            const auto s_vals = finest_coeffs_to_values(s_desc, vs);
            values.insert(values.end(), s_vals.begin(), s_vals.end());
        }
        return values;
    }

    double test_functional(std::size_t k, const std::vector<double>& values) const {
        DiffusionField fld;
        fld.y = y_test[k];
        if (fosls) {
            const std::size_t nu = mesh.n_elements - 1;
            std::vector<double> u(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(nu));
            std::vector<double> s(values.begin() + static_cast<std::ptrdiff_t>(nu), values.end());
            return fosls_functional_nodal(mesh, fld, u, s, 1.0);
        }
        const auto form = make_form<double>(mesh, fld, 1.0);
        return double(energy_loss_nodal<double>(*nodal_raw64, form, values, nullptr).value);
    }
};

// Full-batch objective with fixed-chunk deterministic accumulation. The chunk
// partition is a compile-time constant, so results do not depend on the
// number of worker threads; binary16 runs use a single sequential chunk.
template <class T>
struct BatchObjective {
    TrainingContext<T>* ctx;
    int chunks = 16;
    int threads = 1;
    double grad_scale = 1.0;  // exact power of two applied to the loss cotangent
    std::vector<T> theta_cached;
    long overflow_events = 0;

    BatchObjective(TrainingContext<T>* c, int n_threads) : ctx(c) {
        if (scalar_traits<T>::kind == ScalarKind::binary16) {
            chunks = 1;
            threads = 1;
        } else {
            chunks = std::min<int>(16, ctx->cfg->k_train);
            threads = std::max(1, std::min(n_threads, chunks));
        }
    }

    double value_and_grad(const std::vector<T>& theta, std::vector<T>& grad) {
        const std::size_t K = ctx->y_train.size();
        const std::size_t P = theta.size();
        std::vector<std::vector<T>> chunk_grads(static_cast<std::size_t>(chunks));
        std::vector<T> chunk_loss(static_cast<std::size_t>(chunks), T(0.0));
        std::vector<long> chunk_overflow(static_cast<std::size_t>(chunks), 0);

        auto work = [&](int c) {
            const std::size_t k0 = K * static_cast<std::size_t>(c) / static_cast<std::size_t>(chunks);
            const std::size_t k1 = K * static_cast<std::size_t>(c + 1) / static_cast<std::size_t>(chunks);
            auto& cg = chunk_grads[static_cast<std::size_t>(c)];
            cg.assign(P, T(0.0));
            NetWorkspace<T> ws;
            QuadSamples<T> scratch;
            std::vector<T> out, dout, sample_grad;
            std::array<T, 4> y_t;
            T loss_sum = T(0.0);
            for (std::size_t k = k0; k < k1; ++k) {
                for (std::size_t i = 0; i < 4; ++i) y_t[i] = from_f64<T>(ctx->y_train[k][i]);
                ctx->net->forward(theta, y_t, out, &ws);
                const auto lv = ctx->sample_loss(k, out, &dout, scratch);
                if (lv.overflow) ++chunk_overflow[static_cast<std::size_t>(c)];
                loss_sum += lv.value;
                if (grad_scale != 1.0) {
                    const T gs = from_f64<T>(grad_scale);
                    for (auto& v : dout) v = v * gs;
                }
                ctx->net->backward(theta, y_t, ws, dout, sample_grad);
                for (std::size_t i = 0; i < P; ++i) cg[i] += sample_grad[i];
            }
            chunk_loss[static_cast<std::size_t>(c)] = loss_sum;
        };

        if (threads <= 1) {
            for (int c = 0; c < chunks; ++c) work(c);
        } else {
            std::atomic<int> next{0};
            std::vector<std::thread> pool;
            pool.reserve(static_cast<std::size_t>(threads));
            for (int t = 0; t < threads; ++t)
                pool.emplace_back([&] {
                    for (;;) {
                        const int c = next.fetch_add(1);
                        if (c >= chunks) return;
                        work(c);
                    }
                });
            for (auto& th : pool) th.join();
        }

        grad.assign(P, T(0.0));
        T loss = T(0.0);
        for (int c = 0; c < chunks; ++c) {
            loss += chunk_loss[static_cast<std::size_t>(c)];
            const auto& cg = chunk_grads[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < P; ++i) grad[i] += cg[i];
            overflow_events += chunk_overflow[static_cast<std::size_t>(c)];
        }
        const T inv_k = from_f64<T>(1.0 / static_cast<double>(K));
        for (auto& v : grad) v = v * inv_k;
        loss = loss * inv_k;
        theta_cached = theta;
        return to_f64(loss);
    }

    void gramian_apply(const std::vector<T>& v, std::vector<T>& out) {
        const std::size_t K = ctx->y_train.size();
        out.assign(v.size(), T(0.0));
        NetWorkspace<T> ws;
        QuadSamples<T> scratch;
        std::vector<T> fwd, tangent, cot, g;
        std::array<T, 4> y_t;
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t i = 0; i < 4; ++i) y_t[i] = from_f64<T>(ctx->y_train[k][i]);
            ctx->net->forward(theta_cached, y_t, fwd, &ws);
            ctx->net->jvp(theta_cached, y_t, v, tangent);
            ctx->output_gram(k, tangent, cot, scratch);
            ctx->net->backward(theta_cached, y_t, ws, cot, g);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i];
        }
        const T inv_k = from_f64<T>(1.0 / static_cast<double>(K));
        for (auto& x : out) x = x * inv_k;
    }
};

template <class T>
RunReport run_training_impl(const ExperimentConfig& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    RunReport rep;
    rep.config = cfg;

    TrainingContext<T> ctx(cfg);
    auto theta = init_params<T>(ctx.arch, Rng::derive(cfg.seed, 3));

    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    const int n_threads = cfg.threads > 0 ? cfg.threads : std::max(1, hw);
    BatchObjective<T> obj(&ctx, n_threads);
    const bool scaled_opt = cfg.optim.kind == OptKind::adam || cfg.optim.kind == OptKind::sgd;
    const double grad_scale =
        cfg.optim.loss_scale >= 0.0
            ? cfg.optim.loss_scale
            : (scaled_opt && cfg.precision == ScalarKind::binary16 ? 128.0 : 1.0);
    if (scaled_opt) obj.grad_scale = grad_scale;

    fs::create_directories(cfg.output_dir);
    rep.metrics_path = cfg.output_dir + "/metrics.csv";
    std::ofstream metrics(rep.metrics_path, std::ios::binary);
    metrics << "epoch,train_loss,test_loss,mre,mse\n";
    std::ofstream times(cfg.output_dir + "/times.csv", std::ios::binary);
    times << "epoch,wall_seconds\n";

    std::vector<T> grad(ctx.arch.param_count);

    auto record_metrics = [&](int epoch, double train_loss) {
        std::vector<std::vector<double>> preds;
        preds.reserve(ctx.y_test.size());
        for (std::size_t k = 0; k < ctx.y_test.size(); ++k) preds.push_back(ctx.predict_values(theta, k));
        const auto err = compute_mre_mse(preds, ctx.refs);
        double test_loss = 0.0;
        for (std::size_t k = 0; k < preds.size(); ++k) test_loss += ctx.test_functional(k, preds[k]);
        test_loss /= static_cast<double>(preds.size());
        MetricsRecord r{epoch, train_loss, test_loss, err.mre, err.mse};
        rep.records.push_back(r);
        metrics << r.epoch << "," << fmt_g17(r.train_loss) << "," << fmt_g17(r.test_loss) << "," << fmt_g17(r.mre)
                << "," << fmt_g17(r.mse) << "\n";
        metrics.flush();
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        times << epoch << "," << fmt_g17(wall) << "\n";
        times.flush();
    };

    // initialization metrics (the entire report when epochs == 0)
    {
        std::vector<T> g0(ctx.arch.param_count);
        const double l0 = obj.value_and_grad(theta, g0);
        record_metrics(0, l0);
    }

    CosineSchedule sched;
    sched.eta0 = cfg.optim.lr0;
    sched.eta_min = cfg.optim.lr_min >= 0.0 ? cfg.optim.lr_min : default_eta_min(cfg.precision);
    sched.t_max = cfg.optim.t_max;

    AdamState<T> adam;
    adam.beta1 = cfg.optim.beta1;
    adam.beta2 = cfg.optim.beta2;
    adam.eps = cfg.optim.adam_eps >= 0.0 ? cfg.optim.adam_eps : default_adam_eps(cfg.precision);
    adam.grad_scale = grad_scale;

    LbfgsState<T> lbfgs;
    lbfgs.capacity = cfg.optim.lbfgs_history;
    lbfgs.tol_grad = lbfgs.tol_change =
        cfg.optim.lbfgs_tol >= 0.0 ? cfg.optim.lbfgs_tol : default_lbfgs_tol(cfg.precision);

    NgdConfig ngd;
    ngd.cg_max_iters = cfg.optim.ngd_cg_max;
    ngd.cg_tol = cfg.optim.ngd_cg_tol >= 0.0 ? cfg.optim.ngd_cg_tol : default_ngd_tol(cfg.precision);
    ngd.eps_reg = cfg.optim.ngd_eps >= 0.0 ? cfg.optim.ngd_eps : default_ngd_tol(cfg.precision);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double train_loss = 0.0;
        switch (cfg.optim.kind) {
            case OptKind::sgd: {
                train_loss = obj.value_and_grad(theta, grad);
                sgd_step(theta, grad, cosine_lr(sched, epoch - 1) / grad_scale);
                break;
            }
            case OptKind::adam: {
                train_loss = obj.value_and_grad(theta, grad);
                adam_step(adam, theta, grad, cosine_lr(sched, epoch - 1));
                break;
            }
            case OptKind::lbfgs: {
                const auto r = lbfgs_step(lbfgs, obj, theta);
                train_loss = r.f;
                break;
            }
            case OptKind::ngd: {
                const auto r = ngd_step(ngd, obj, theta);
                train_loss = r.f;
                break;
            }
        }
        if (!std::isfinite(train_loss)) {
            rep.diverged = true;
            record_metrics(epoch, train_loss);
            break;
        }
        if (epoch % cfg.metric_every == 0 || epoch == cfg.epochs) record_metrics(epoch, train_loss);
    }

    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    rep.overflow_events = obj.overflow_events;

    rep.checkpoint_path = cfg.output_dir + "/checkpoint.txt";
    save_checkpoint(rep.checkpoint_path, cfg, widen_vector(theta));
    write_text_file(cfg.output_dir + "/loss_curve.svg", svg_loss_curve(rep.records));

    rep.summary_path = cfg.output_dir + "/summary.csv";
    {
        const auto& last = rep.records.back();
        std::ostringstream s;
        s << "optimizer,preconditioning,precision,architecture,formulation,levels,epochs,train_samples,test_samples,"
             "seed,final_mre,final_mse,final_test_loss,final_train_loss,diverged,overflow_events\n";
        s << opt_name(cfg.optim.kind) << "," << precond_name(cfg.precond) << "," << kind_name(cfg.precision) << ","
          << arch_name(cfg.arch) << "," << formulation_name(cfg.formulation) << "," << cfg.J << "," << cfg.epochs
          << "," << cfg.k_train << "," << cfg.n_test << "," << cfg.seed << "," << fmt_g17(last.mre) << ","
          << fmt_g17(last.mse) << "," << fmt_g17(last.test_loss) << "," << fmt_g17(last.train_loss) << ","
          << (rep.diverged ? 1 : 0) << "," << rep.overflow_events << "\n";
        write_text_file(rep.summary_path, s.str());
    }
    return rep;
}

}  // namespace

RunReport run_training(const ExperimentConfig& cfg) {
    switch (cfg.precision) {
        case ScalarKind::binary16: return run_training_impl<half>(cfg);
        case ScalarKind::binary32: return run_training_impl<float>(cfg);
        case ScalarKind::binary64: return run_training_impl<double>(cfg);
    }
    throw std::logic_error("run_training: bad precision");
}

// ---- studies ----------------------------------------------------------------

std::vector<CondRow> cond_report(int jmin, int jmax, int samples, std::uint64_t seed, const std::string& csv_path) {
    if (jmin < 2 || jmax > 8 || jmin > jmax) throw std::invalid_argument("cond_report: J range must lie in [2, 8]");
    std::vector<CondRow> rows;
    const auto ys = sample_parameters(samples, seed);
    for (int J = jmin; J <= jmax; ++J) {
        const DyadicMesh mesh = build_mesh(J);
        const auto u_desc = build_frame(Space::H10, J);
        const auto s_desc = build_frame(Space::H1, J);
        StableOperator<double> op(Formulation::fosls, u_desc, &s_desc, mesh);
        FrameOps<double> u_ops(u_desc), s_ops(s_desc);
        const auto nt = make_nodal_tables<double>(Formulation::fosls, mesh, u_desc, &s_desc, true, 1.0);
        SampleOpF64 d_op(op);
        const DenseMatrix d = densify(d_op);
        DenseMatrix d_gram(d.cols, d.cols);
        for (std::size_t i = 0; i < d.cols; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t r = 0; r < d.rows; ++r) s += d(r, i) * d(r, j);
                d_gram(i, j) = d_gram(j, i) = s;
            }
        const auto d_ev = sym_eig(d_gram, false);
        // Gram eigenvalues at the numerical noise floor count as kernel
        const double cond_d = std::sqrt(effective_condition(d_ev.values, 1e-10));

        for (int s_idx = 0; s_idx <= samples; ++s_idx) {
            CondRow row;
            row.J = J;
            row.sample = s_idx;
            row.y = s_idx == 0 ? std::array<double, 4>{1.0, 1.0, 1.0, 1.0} : ys[static_cast<std::size_t>(s_idx - 1)];
            DiffusionField fld;
            fld.y = row.y;
            const auto form = make_form<double>(mesh, fld, 1.0);
            row.cond_a = condition_number(densify_nodal_form(nt, form));
            PreconditionedFormOp hah(u_ops, s_ops, nt, form);
            row.cond_hah = effective_condition(sym_eig(densify(hah), false).values, 1e-8);
            StableFormOp dcd(op, form);
            row.cond_dcd = effective_condition(sym_eig(densify(dcd), false).values, 1e-8);
            row.cond_d = cond_d;
            row.cond_c = effective_condition(cy_nonzero_eigenvalues(op, form), 0.0);
            rows.push_back(row);
        }
    }
    if (!csv_path.empty()) {
        std::ostringstream s;
        s << "J,sample,y1,y2,y3,y4,cond_a,cond_hah,cond_dcd,cond_d,cond_c\n";
        for (const auto& r : rows) {
            s << r.J << "," << r.sample;
            for (double v : r.y) s << "," << fmt_g17(v);
            s << "," << fmt_g17(r.cond_a) << "," << fmt_g17(r.cond_hah) << "," << fmt_g17(r.cond_dcd) << ","
              << fmt_g17(r.cond_d) << "," << fmt_g17(r.cond_c) << "\n";
        }
        write_text_file(csv_path, s.str());
    }
    return rows;
}

std::vector<PrecisionRow> precision_experiment(int J, int trials, std::uint64_t seed, const std::string& csv_path) {
    const DyadicMesh mesh = build_mesh(J);
    const auto u_desc = build_frame(Space::H10, J);
    const auto s_desc = build_frame(Space::H1, J);
    StableOperator<double> op64(Formulation::fosls, u_desc, &s_desc, mesh);
    StableOperator<float> op32(Formulation::fosls, u_desc, &s_desc, mesh);
    StableOperator<half> op16(Formulation::fosls, u_desc, &s_desc, mesh);
    FrameOps<double> u64(u_desc), s64(s_desc);
    FrameOps<float> u32(u_desc), s32(s_desc);
    FrameOps<half> u16(u_desc), s16(s_desc);
    const auto nt64 = make_nodal_tables<double>(Formulation::fosls, mesh, u_desc, &s_desc, true, 1.0);
    const auto nt32 = make_nodal_tables<float>(Formulation::fosls, mesh, u_desc, &s_desc, true, 1.0);
    const auto nt16 = make_nodal_tables<half>(Formulation::fosls, mesh, u_desc, &s_desc, true, 1.0);

    Rng rng(seed);
    std::vector<PrecisionRow> rows;
    for (int t = 0; t < trials; ++t) {
        DiffusionField fld;
        for (auto& v : fld.y) v = rng.uniform(0.5, 1.5);
        const auto w = sample_frame_unit_vector(u_desc, &s_desc, rng);
        const auto form64 = make_form<double>(mesh, fld, 1.0);

        auto push = [&]<class T>(ScalarKind kind, const StableOperator<T>& op_t, const FrameOps<T>& u_t,
                                 const FrameOps<T>& s_t, const NodalTables<T>& nt_t) {
            PrecisionRow row;
            row.trial = t;
            row.kind = kind;
            row.y = fld.y;
            // round the input once; the truth is evaluated on the rounded input
            std::vector<T> w_t(w.size());
            std::vector<double> w_r(w.size());
            for (std::size_t i = 0; i < w.size(); ++i) {
                w_t[i] = from_f64<T>(w[i]);
                w_r[i] = to_f64(w_t[i]);
            }
            row.truth = fosls_quad_form_stable<double>(op64, form64, w_r);
            const auto form_t = make_form<T>(mesh, fld, 1.0);
            row.value_stable = to_f64(fosls_quad_form_stable<T>(op_t, form_t, w_t));
            row.value_unstable = to_f64(fosls_quad_form_unstable<T>(u_t, s_t, nt_t, form_t, w_t));
            row.err_stable = std::abs(row.value_stable - row.truth) / std::abs(row.truth);
            row.err_unstable = std::abs(row.value_unstable - row.truth) / std::abs(row.truth);
            rows.push_back(row);
        };
        push(ScalarKind::binary16, op16, u16, s16, nt16);
        push(ScalarKind::binary32, op32, u32, s32, nt32);
        push(ScalarKind::binary64, op64, u64, s64, nt64);
    }
    if (!csv_path.empty()) {
        std::ostringstream s;
        s << "trial,precision,y1,y2,y3,y4,value_stable,value_unstable,truth,err_stable,err_unstable\n";
        for (const auto& r : rows) {
            s << r.trial << "," << kind_name(r.kind);
            for (double v : r.y) s << "," << fmt_g17(v);
            s << "," << fmt_g17(r.value_stable) << "," << fmt_g17(r.value_unstable) << "," << fmt_g17(r.truth) << ","
              << fmt_g17(r.err_stable) << "," << fmt_g17(r.err_unstable) << "\n";
        }
        write_text_file(csv_path, s.str());
    }
    return rows;
}

std::vector<InitDemoRow> init_demo(ArchKind arch, int count, std::uint64_t seed, int J, const std::string& out_dir) {
    const DyadicMesh mesh = build_mesh(J);
    const auto u_desc = build_frame(Space::H10, J);
    const auto s_desc = build_frame(Space::H1, J);
    const auto spec = build_architecture(arch, Formulation::fosls, u_desc, &s_desc);
    FrameOps<double> u_ops(u_desc), s_ops(s_desc);
    Network<double> net(spec, &u_ops, &s_ops);
    std::array<double, 4> y{1.0, 1.0, 1.0, 1.0};

    fs::create_directories(out_dir);
    std::ostringstream fields;
    fields << "draw,kind,node,x,value\n";
    std::vector<InitDemoRow> rows;
    for (int d = 0; d < count; ++d) {
        const auto theta = init_params<double>(spec, Rng::derive(seed, static_cast<std::uint64_t>(d)));
        std::vector<double> out;
        net.forward(theta, y, out);
        std::vector<double> wu(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(u_desc.total_size));
        std::vector<double> vu;
        u_ops.synthesize(wu, vu);
        const auto frame_vals = finest_coeffs_to_values(u_desc, vu);
        std::vector<double> raw_vals(mesh.n_nodes(), 0.0);
        for (std::size_t k = 0; k < u_desc.finest_size(); ++k) raw_vals[k + 1] = wu[u_desc.level_offset(J) + k];
        InitDemoRow row;
        row.draw = d;
        row.h1_frame = std::sqrt(h1_norm_sq_nodal(mesh, frame_vals));
        row.h1_raw = std::sqrt(h1_norm_sq_nodal(mesh, raw_vals));
        rows.push_back(row);
        for (std::size_t k = 0; k < frame_vals.size(); ++k)
            fields << d << ",frame," << k << "," << fmt_g17(static_cast<double>(k) * mesh.h) << ","
                   << fmt_g17(frame_vals[k]) << "\n";
        for (std::size_t k = 0; k < raw_vals.size(); ++k)
            fields << d << ",raw," << k << "," << fmt_g17(static_cast<double>(k) * mesh.h) << ","
                   << fmt_g17(raw_vals[k]) << "\n";
    }
    write_text_file(out_dir + "/init_fields.csv", fields.str());
    std::ostringstream norms;
    norms << "draw,h1_frame,h1_raw,ratio\n";
    for (const auto& r : rows)
        norms << r.draw << "," << fmt_g17(r.h1_frame) << "," << fmt_g17(r.h1_raw) << ","
              << fmt_g17(r.h1_raw / r.h1_frame) << "\n";
    write_text_file(out_dir + "/init_norms.csv", norms.str());
    return rows;
}

void write_reference_csv(const std::array<double, 4>& y, int J, const std::string& csv_path) {
    DiffusionField fld;
    fld.y = y;
    const DyadicMesh mesh = build_mesh(J);
    const auto [u, sigma] = solve_reference(fld, J);
    std::ostringstream s;
    s << "node,x,u,sigma\n";
    for (std::size_t k = 0; k < mesh.n_nodes(); ++k) {
        const double uv = (k == 0 || k == mesh.n_elements) ? 0.0 : u[k - 1];
        s << k << "," << fmt_g17(static_cast<double>(k) * mesh.h) << "," << fmt_g17(uv) << "," << fmt_g17(sigma[k])
          << "\n";
    }
    write_text_file(csv_path, s.str());
}

std::string render_report(const std::string& dir) {
    struct Row {
        std::map<std::string, std::string> kv;
    };
    std::vector<Row> found;
    for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file() || it->path().filename() != "summary.csv") continue;
        std::ifstream in(it->path());
        std::string header, data;
        if (!std::getline(in, header) || !std::getline(in, data)) continue;
        std::vector<std::string> keys, vals;
        std::stringstream hs(header), ds(data);
        std::string tok;
        while (std::getline(hs, tok, ',')) keys.push_back(tok);
        while (std::getline(ds, tok, ',')) vals.push_back(tok);
        if (keys.size() != vals.size()) continue;
        Row r;
        for (std::size_t i = 0; i < keys.size(); ++i) r.kv[keys[i]] = vals[i];
        found.push_back(std::move(r));
    }
    const auto rank_opt = [](const std::string& s) {
        if (s == "sgd") return 0;
        if (s == "adam") return 1;
        if (s == "lbfgs") return 2;
        return 3;
    };
    const auto rank_prec = [](const std::string& s) {
        if (s == "f16") return 0;
        if (s == "f32") return 1;
        return 2;
    };
    std::sort(found.begin(), found.end(), [&](const Row& a, const Row& b) {
        const auto ka =
            std::make_tuple(rank_opt(a.kv.at("optimizer")), a.kv.at("preconditioning"), rank_prec(a.kv.at("precision")));
        const auto kb =
            std::make_tuple(rank_opt(b.kv.at("optimizer")), b.kv.at("preconditioning"), rank_prec(b.kv.at("precision")));
        return ka < kb;
    });
    std::ostringstream s;
    s << "| Optimizer | Precond. | Precision | MRE | MSE | Loss |\n";
    s << "|---|---|---|---|---|---|\n";
    auto sci = [](const std::string& v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2e", std::strtod(v.c_str(), nullptr));
        return std::string(buf);
    };
    for (const auto& r : found) {
        const std::string& pc = r.kv.at("preconditioning");
        s << "| " << r.kv.at("optimizer") << " | " << (pc == "none" ? "no" : pc) << " | " << r.kv.at("precision")
          << " | " << sci(r.kv.at("final_mre")) << " | " << sci(r.kv.at("final_mse")) << " | "
          << sci(r.kv.at("final_test_loss")) << " |\n";
    }
    return s.str();
}

}  // namespace bpxnn
