#include "bpxnn/nn.hpp"

namespace bpxnn {

template class Network<double>;
template class Network<float>;
template class Network<half>;

namespace {

struct Builder {
    ArchSpec spec;

    std::size_t add_tensor(const std::string& name, std::size_t rows, std::size_t cols, bool weight) {
        TensorDesc t;
        t.name = name;
        t.offset = spec.param_count;
        t.rows = rows;
        t.cols = cols;
        t.is_weight = weight;
        spec.param_count += t.count();
        spec.tensors.push_back(std::move(t));
        return spec.tensors.back().offset;
    }

    void add_input_linear(ChainDesc& chain, const std::string& prefix, std::size_t n_out) {
        LayerDesc L;
        L.kind = LayerDesc::Kind::input_linear;
        L.dim_in = ArchSpec::input_dim;
        L.dim_out = n_out;
        L.w_off = add_tensor(prefix + ".W0", n_out, ArchSpec::input_dim, true);
        L.b_in_off = add_tensor(prefix + ".b0", n_out, 1, false);
        chain.layers.push_back(L);
    }

    void add_res_block(ChainDesc& chain, const std::string& prefix, std::size_t n, std::size_t rank) {
        LayerDesc L;
        L.kind = LayerDesc::Kind::res_block;
        L.dim_in = L.dim_out = n;
        L.rank = rank;
        L.w_off = add_tensor(prefix + ".W", rank, n, true);
        L.b_in_off = add_tensor(prefix + ".b_in", rank, 1, false);
        L.a_off = add_tensor(prefix + ".A", n, rank, true);
        L.b_out_off = add_tensor(prefix + ".b_out", n, 1, false);
        chain.layers.push_back(L);
    }

    void add_prolong(ChainDesc& chain, int level, std::size_t n_in, std::size_t n_out) {
        LayerDesc L;
        L.kind = LayerDesc::Kind::prolong;
        L.dim_in = n_in;
        L.dim_out = n_out;
        L.level = level;
        chain.layers.push_back(L);
    }
};

constexpr std::size_t kFullRank = 8;
constexpr std::size_t kMaxRank = 8;
constexpr int kFullBlocks = 8;
constexpr int kSeparateBlocks = 8;
constexpr int kFrameBlocks = 4;

}  // namespace

ArchSpec build_architecture(ArchKind kind, Formulation formulation, const FrameDescriptor& u_desc,
                            const FrameDescriptor* s_desc, bool frame_output) {
    if (formulation == Formulation::fosls && s_desc == nullptr)
        throw std::invalid_argument("build_architecture: FOSLS requires a sigma frame");
    if (!frame_output && kind != ArchKind::full)
        throw std::invalid_argument("build_architecture: nodal output requires the full architecture");

    Builder b;
    b.spec.kind = kind;
    b.spec.formulation = formulation;
    b.spec.frame_output = frame_output;
    b.spec.J = u_desc.J;

    const bool fosls = formulation == Formulation::fosls;
    const std::size_t nu = frame_output ? u_desc.total_size : u_desc.finest_size();
    const std::size_t ns = fosls ? (frame_output ? s_desc->total_size : s_desc->finest_size()) : 0;
    b.spec.output_dim = nu + ns;

    struct Field {
        const FrameDescriptor* desc;
        Space space;
        std::size_t base;
    };
    std::vector<Field> fields;
    fields.push_back({&u_desc, Space::H10, 0});
    if (fosls) fields.push_back({s_desc, Space::H1, nu});

    switch (kind) {
        case ArchKind::full: {
            ChainDesc chain;
            chain.out_offset = 0;
            chain.out_size = b.spec.output_dim;
            b.add_input_linear(chain, "net", b.spec.output_dim);
            for (int i = 0; i < kFullBlocks; ++i)
                b.add_res_block(chain, "net.blk" + std::to_string(i), b.spec.output_dim, kFullRank);
            b.spec.chains.push_back(std::move(chain));
            break;
        }
        case ArchKind::separate_resnet: {
            for (const auto& f : fields) {
                const std::string fname = f.space == Space::H10 ? "u" : "sigma";
                for (int j = 1; j <= f.desc->J; ++j) {
                    ChainDesc chain;
                    chain.space = f.space;
                    chain.out_offset = f.base + f.desc->level_offset(j);
                    chain.out_size = f.desc->level_size(j);
                    const std::size_t n = f.desc->level_size(j);
                    const std::string prefix = fname + ".lvl" + std::to_string(j);
                    b.add_input_linear(chain, prefix, n);
                    for (int i = 0; i < kSeparateBlocks; ++i)
                        b.add_res_block(chain, prefix + ".blk" + std::to_string(i), n, std::min(kMaxRank, n));
                    b.spec.chains.push_back(std::move(chain));
                }
            }
            break;
        }
        case ArchKind::separate_frame: {
            for (const auto& f : fields) {
                const std::string fname = f.space == Space::H10 ? "u" : "sigma";
                for (int j = 1; j <= f.desc->J; ++j) {
                    ChainDesc chain;
                    chain.space = f.space;
                    chain.out_offset = f.base + f.desc->level_offset(j);
                    chain.out_size = f.desc->level_size(j);
                    const std::string prefix = fname + ".to" + std::to_string(j);
                    b.add_input_linear(chain, prefix, f.desc->level_size(1));
                    for (int stage = 1; stage <= j; ++stage) {
                        const std::size_t n = f.desc->level_size(stage);
                        if (stage > 1) b.add_prolong(chain, stage, f.desc->level_size(stage - 1), n);
                        for (int i = 0; i < kFrameBlocks; ++i)
                            b.add_res_block(chain,
                                            prefix + ".s" + std::to_string(stage) + ".blk" + std::to_string(i), n,
                                            std::min(kMaxRank, n));
                    }
                    b.spec.chains.push_back(std::move(chain));
                }
            }
            break;
        }
    }
    return std::move(b.spec);
}

std::vector<double> xavier_init(std::size_t rows, std::size_t cols, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(rows + cols));
    std::vector<double> m(rows * cols);
    for (auto& v : m) v = std_dev * rng.gaussian();
    return m;
}

std::vector<double> init_params_f64(const ArchSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> theta(spec.param_count, 0.0);
    for (const auto& t : spec.tensors) {
        if (!t.is_weight) continue;
        const auto block = xavier_init(t.rows, t.cols, rng);
        std::copy(block.begin(), block.end(), theta.begin() + static_cast<std::ptrdiff_t>(t.offset));
    }
    return theta;
}

}  // namespace bpxnn
