#include "msrs/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "msrs/errors.hpp"

namespace msrs {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'R', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr double kOrthoTol = 1e-8;

std::uint64_t fnv1a(const unsigned char* bytes, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64_bits(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void tensor(const Matrix& m) {
        u32(static_cast<std::uint32_t>(m.rows()));
        u32(static_cast<std::uint32_t>(m.cols()));
        std::vector<unsigned char> payload(m.size() * 8);
        for (std::size_t i = 0; i < m.size(); ++i) {
            const std::uint64_t bits = std::bit_cast<std::uint64_t>(m.data()[i]);
            for (int b = 0; b < 8; ++b) {
                payload[i * 8 + static_cast<std::size_t>(b)] =
                    static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
            }
        }
        buf_.insert(buf_.end(), payload.begin(), payload.end());
        u64(fnv1a(payload.data(), payload.size()));
    }

    void write_file(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open for writing: " + path);
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw io_error("write failed: " + path);
    }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open: " + path);
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::uint8_t u8() {
        need(1, "header");
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        need(4, "header");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64(const char* what = "header") {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64("metadata")); }
    double f64_bits() { return std::bit_cast<double>(u64("metadata")); }

    Matrix tensor() {
        const std::uint32_t rows = u32();
        const std::uint32_t cols = u32();
        const std::size_t n = static_cast<std::size_t>(rows) * cols;
        need(n * 8, "tensor payload");
        const unsigned char* payload = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(payload[i * 8 + static_cast<std::size_t>(b)])
                        << (8 * b);
            }
            m.data()[i] = std::bit_cast<double>(bits);
        }
        pos_ += n * 8;
        const std::uint64_t stored = u64("tensor checksum");
        if (stored != fnv1a(payload, n * 8)) {
            throw io_error(path_ + ": checksum mismatch in tensor payload");
        }
        if (!m.all_finite()) throw io_error(path_ + ": non-finite tensor entry");
        return m;
    }

    void expect_header(ObjectKind kind) {
        need(4, "magic");
        if (std::memcmp(buf_.data() + pos_, kMagic, 4) != 0) {
            throw io_error(path_ + ": bad magic bytes");
        }
        pos_ += 4;
        const std::uint32_t version = u32();
        if (version != kVersion) {
            throw io_error(path_ + ": unsupported format version " + std::to_string(version));
        }
        const std::uint8_t k = u8();
        if (k != static_cast<std::uint8_t>(kind)) {
            throw io_error(path_ + ": wrong object kind tag " + std::to_string(k));
        }
    }

    void expect_end() {
        if (pos_ != buf_.size()) throw io_error(path_ + ": trailing bytes after object");
    }

private:
    void need(std::size_t n, const char* what) {
        if (pos_ + n > buf_.size()) {
            throw io_error(path_ + ": truncated file (while reading " + what + ")");
        }
    }

    std::string path_;
    std::string buf_;
    std::size_t pos_ = 0;
};

void write_header(Writer& w, ObjectKind kind) {
    for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
    w.u32(kVersion);
    w.u8(static_cast<std::uint8_t>(kind));
}

void check_orthonormal_rows(const Matrix& m, const std::string& path, const char* what) {
    if (m.rows() == 0) return;
    const Matrix gram = matmul_nt(m, m);
    if (max_abs_diff(gram, Matrix::identity(m.rows())) > kOrthoTol) {
        throw io_error(path + ": orthonormality check failed for " + what);
    }
}

void write_layout(Writer& w, const std::vector<BlockDesc>& layout) {
    w.u32(static_cast<std::uint32_t>(layout.size()));
    for (const BlockDesc& b : layout) {
        w.i64(b.kind == SubspaceBasis::Kind::Shared ? 0 : 1);
        w.i64(b.attribute);
        w.i64(static_cast<std::int64_t>(b.offset));
        w.i64(static_cast<std::int64_t>(b.length));
    }
}

std::vector<BlockDesc> read_layout(Reader& r, const std::string& path) {
    const std::uint32_t n = r.u32();
    std::vector<BlockDesc> layout;
    std::size_t at = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        BlockDesc b;
        const std::int64_t kind = r.i64();
        if (kind != 0 && kind != 1) throw io_error(path + ": layout block kind out of range");
        b.kind = kind == 0 ? SubspaceBasis::Kind::Shared : SubspaceBasis::Kind::Private;
        b.attribute = static_cast<int>(r.i64());
        b.offset = static_cast<std::size_t>(r.i64());
        b.length = static_cast<std::size_t>(r.i64());
        if (b.offset != at) throw io_error(path + ": layout blocks do not tile [0, r)");
        at += b.length;
        layout.push_back(b);
    }
    if (layout.empty() || layout[0].kind != SubspaceBasis::Kind::Shared) {
        throw io_error(path + ": layout must start with the shared block");
    }
    return layout;
}

} // namespace

void save_matrix(const std::string& path, const Matrix& m) {
    Writer w;
    write_header(w, ObjectKind::RawMatrix);
    w.u32(0); // no metadata
    w.u32(1);
    w.tensor(m);
    w.write_file(path);
}

Matrix load_matrix(const std::string& path) {
    Reader r(path);
    r.expect_header(ObjectKind::RawMatrix);
    if (r.u32() != 0) throw io_error(path + ": unexpected metadata");
    if (r.u32() != 1) throw io_error(path + ": expected exactly one tensor");
    Matrix m = r.tensor();
    r.expect_end();
    return m;
}

void save_basis(const std::string& path, const SubspaceBasis& basis) {
    Writer w;
    write_header(w, ObjectKind::Basis);
    w.u32(3);
    w.i64(basis.kind == SubspaceBasis::Kind::Shared ? 0 : 1);
    w.i64(basis.attribute);
    w.f64_bits(basis.energy_captured);
    w.u32(1);
    w.tensor(basis.basis);
    w.write_file(path);
}

SubspaceBasis load_basis(const std::string& path) {
    Reader r(path);
    r.expect_header(ObjectKind::Basis);
    if (r.u32() != 3) throw io_error(path + ": unexpected metadata length");
    SubspaceBasis b;
    const std::int64_t kind = r.i64();
    if (kind != 0 && kind != 1) throw io_error(path + ": basis kind out of range");
    b.kind = kind == 0 ? SubspaceBasis::Kind::Shared : SubspaceBasis::Kind::Private;
    b.attribute = static_cast<int>(r.i64());
    b.energy_captured = r.f64_bits();
    if (r.u32() != 1) throw io_error(path + ": expected exactly one tensor");
    b.basis = r.tensor();
    r.expect_end();
    check_orthonormal_rows(b.basis, path, "basis rows");
    return b;
}

void save_aligned(const std::string& path, const AlignedSubspace& aligned) {
    Writer w;
    write_header(w, ObjectKind::Aligned);
    w.u32(0);
    write_layout(w, aligned.layout);
    w.u32(1);
    w.tensor(aligned.matrix);
    w.write_file(path);
}

AlignedSubspace load_aligned(const std::string& path) {
    Reader r(path);
    r.expect_header(ObjectKind::Aligned);
    if (r.u32() != 0) throw io_error(path + ": unexpected metadata");
    AlignedSubspace a;
    a.layout = read_layout(r, path);
    if (r.u32() != 1) throw io_error(path + ": expected exactly one tensor");
    a.matrix = r.tensor();
    r.expect_end();

    std::size_t total = 0;
    for (const BlockDesc& b : a.layout) {
        total += b.length;
        if (b.kind == SubspaceBasis::Kind::Private) a.attribute_order.push_back(b.attribute);
    }
    if (total != a.matrix.rows()) {
        throw io_error(path + ": layout blocks do not tile the stored matrix");
    }

    const Matrix shared = a.slice_block(a.layout[0]);
    check_orthonormal_rows(shared, path, "shared block");
    for (std::size_t i = 1; i < a.layout.size(); ++i) {
        const Matrix priv = a.slice_block(a.layout[i]);
        if (priv.rows() == 0 || shared.rows() == 0) continue;
        if (max_abs(matmul_nt(shared, priv)) > kOrthoTol) {
            throw io_error(path + ": orthonormality check failed: private block " +
                           std::to_string(i) + " is not orthogonal to the shared block");
        }
    }
    return a;
}

void save_model(const std::string& path, const FrozenModel& model) {
    Writer w;
    write_header(w, ObjectKind::Model);
    w.u32(6);
    const ModelConfig& c = model.config();
    w.i64(c.vocab_size);
    w.i64(c.d_model);
    w.i64(c.n_layers);
    w.i64(c.n_heads);
    w.i64(c.max_seq_len);
    w.i64(static_cast<std::int64_t>(c.seed));
    const auto weights = model.weight_list();
    w.u32(static_cast<std::uint32_t>(weights.size()));
    for (const Matrix* m : weights) w.tensor(*m);
    w.write_file(path);
}

FrozenModel load_model(const std::string& path) {
    Reader r(path);
    r.expect_header(ObjectKind::Model);
    if (r.u32() != 6) throw io_error(path + ": unexpected metadata length");
    ModelConfig c;
    c.vocab_size = static_cast<int>(r.i64());
    c.d_model = static_cast<int>(r.i64());
    c.n_layers = static_cast<int>(r.i64());
    c.n_heads = static_cast<int>(r.i64());
    c.max_seq_len = static_cast<int>(r.i64());
    c.seed = static_cast<std::uint64_t>(r.i64());

    FrozenModel skeleton = init_model(c); // shapes from config
    auto weights = skeleton.weight_list();
    const std::uint32_t count = r.u32();
    if (count != weights.size()) throw io_error(path + ": model tensor count mismatch");
    for (Matrix* slot : weights) {
        Matrix loaded = r.tensor();
        if (!loaded.same_shape(*slot)) throw io_error(path + ": model tensor shape mismatch");
        *slot = std::move(loaded);
    }
    r.expect_end();
    return skeleton;
}

void save_checkpoint(const std::string& path, const SteeringModule& module) {
    Writer w;
    write_header(w, ObjectKind::Checkpoint);
    w.u32(4);
    w.i64(static_cast<std::int64_t>(module.granularity));
    w.i64(module.layer);
    w.f64_bits(module.lambda1);
    w.f64_bits(module.lambda2);
    write_layout(w, module.s_align.layout);
    w.u32(8);
    w.tensor(module.r_basis);
    w.tensor(module.w);
    w.tensor(module.b);
    w.tensor(module.mlp_w1);
    w.tensor(module.mlp_b1);
    w.tensor(module.mlp_w2);
    w.tensor(module.mlp_b2);
    w.tensor(module.s_align.matrix);
    w.write_file(path);
}

SteeringModule load_checkpoint(const std::string& path) {
    Reader r(path);
    r.expect_header(ObjectKind::Checkpoint);
    if (r.u32() != 4) throw io_error(path + ": unexpected metadata length");
    SteeringModule m;
    const std::int64_t gran = r.i64();
    if (gran < 0 || gran > 2) throw io_error(path + ": granularity tag out of range");
    m.granularity = static_cast<Granularity>(gran);
    m.layer = static_cast<int>(r.i64());
    m.lambda1 = r.f64_bits();
    m.lambda2 = r.f64_bits();
    if (m.lambda1 < 0.0 || m.lambda2 < 0.0) throw io_error(path + ": negative lambda");
    m.s_align.layout = read_layout(r, path);
    for (const BlockDesc& b : m.s_align.layout) {
        if (b.kind == SubspaceBasis::Kind::Private) {
            m.s_align.attribute_order.push_back(b.attribute);
        }
    }
    if (r.u32() != 8) throw io_error(path + ": checkpoint tensor count mismatch");
    m.r_basis = r.tensor();
    m.w = r.tensor();
    m.b = r.tensor();
    m.mlp_w1 = r.tensor();
    m.mlp_b1 = r.tensor();
    m.mlp_w2 = r.tensor();
    m.mlp_b2 = r.tensor();
    m.s_align.matrix = r.tensor();
    r.expect_end();

    const std::size_t rank = m.r_basis.rows();
    const std::size_t d = m.r_basis.cols();
    std::size_t total = 0;
    for (const BlockDesc& b : m.s_align.layout) total += b.length;
    if (total != rank || m.s_align.matrix.rows() != rank || m.s_align.matrix.cols() != d ||
        !m.w.same_shape(m.r_basis) || m.b.cols() != rank || m.b.rows() != 1 ||
        m.mlp_w1.rows() != d || m.mlp_w1.cols() != rank || m.mlp_b1.cols() != rank ||
        m.mlp_w2.rows() != rank || m.mlp_w2.cols() != m.mask_output_dim() ||
        m.mlp_b2.cols() != m.mask_output_dim()) {
        throw io_error(path + ": checkpoint shape mismatch");
    }
    return m;
}

} // namespace msrs
