#include "msrs/tape.hpp"

#include <cmath>
#include <string>

#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"

namespace msrs {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_derivative(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

// Stable softmax of one row into out.
void softmax_row(const double* x, double* out, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - m);
        s += out[i];
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

} // namespace

GradTape::Id GradTape::push(Node n) {
    nodes_.push_back(std::move(n));
    const std::size_t idx = nodes_.size() - 1;
    if (nodes_[idx].op != Op::Input) compute(idx);
    return static_cast<Id>(idx);
}

void GradTape::check_id(Id id, const char* op) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw config_error(std::string(op) + ": invalid node id");
    }
}

void GradTape::check_not_frozen(const char* op) const {
    if (frozen_) {
        throw config_error(std::string(op) + ": tape mutated during gradient check");
    }
}

GradTape::Id GradTape::input(Matrix value, bool trainable) {
    check_not_frozen("input");
    Node n;
    n.op = Op::Input;
    n.trainable = trainable;
    n.value = std::move(value);
    return push(std::move(n));
}

GradTape::Id GradTape::matmul(Id a, Id b) {
    check_not_frozen("matmul");
    check_id(a, "matmul");
    check_id(b, "matmul");
    if (nodes_[a].value.cols() != nodes_[b].value.rows()) {
        throw config_error("matmul: inner dimension mismatch");
    }
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

GradTape::Id GradTape::add(Id a, Id b) {
    check_not_frozen("add");
    check_id(a, "add");
    check_id(b, "add");
    if (!nodes_[a].value.same_shape(nodes_[b].value)) throw config_error("add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

GradTape::Id GradTape::sub(Id a, Id b) {
    check_not_frozen("sub");
    check_id(a, "sub");
    check_id(b, "sub");
    if (!nodes_[a].value.same_shape(nodes_[b].value)) throw config_error("sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

GradTape::Id GradTape::scale(Id a, double s) {
    check_not_frozen("scale");
    check_id(a, "scale");
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.scalar = s;
    return push(std::move(n));
}

GradTape::Id GradTape::hadamard(Id a, Id b) {
    check_not_frozen("hadamard");
    check_id(a, "hadamard");
    check_id(b, "hadamard");
    if (!nodes_[a].value.same_shape(nodes_[b].value)) {
        throw config_error("hadamard: shape mismatch");
    }
    Node n;
    n.op = Op::Hadamard;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

GradTape::Id GradTape::reciprocal(Id a) {
    check_not_frozen("reciprocal");
    check_id(a, "reciprocal");
    Node n;
    n.op = Op::Reciprocal;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::sigmoid(Id a) {
    check_not_frozen("sigmoid");
    check_id(a, "sigmoid");
    Node n;
    n.op = Op::Sigmoid;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::gelu(Id a) {
    check_not_frozen("gelu");
    check_id(a, "gelu");
    Node n;
    n.op = Op::Gelu;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::layer_norm(Id x, Id gain, Id bias) {
    check_not_frozen("layer_norm");
    check_id(x, "layer_norm");
    check_id(gain, "layer_norm");
    check_id(bias, "layer_norm");
    const std::size_t cols = nodes_[x].value.cols();
    if (nodes_[gain].value.rows() != 1 || nodes_[gain].value.cols() != cols ||
        nodes_[bias].value.rows() != 1 || nodes_[bias].value.cols() != cols) {
        throw config_error("layer_norm: gain/bias must be 1 x cols");
    }
    Node n;
    n.op = Op::LayerNorm;
    n.a = x;
    n.b = gain;
    n.c = bias;
    return push(std::move(n));
}

GradTape::Id GradTape::softmax_rows(Id a) {
    check_not_frozen("softmax_rows");
    check_id(a, "softmax_rows");
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::cross_entropy(Id logits, std::vector<int> gold) {
    check_not_frozen("cross_entropy");
    check_id(logits, "cross_entropy");
    const Matrix& v = nodes_[logits].value;
    if (gold.size() != v.rows()) throw config_error("cross_entropy: one gold id per row");
    for (int g : gold) {
        if (g < 0 || static_cast<std::size_t>(g) >= v.cols()) {
            throw config_error("cross_entropy: gold id out of range");
        }
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.a = logits;
    n.indices = std::move(gold);
    return push(std::move(n));
}

GradTape::Id GradTape::gather_rows(Id table, std::vector<int> ids) {
    check_not_frozen("gather_rows");
    check_id(table, "gather_rows");
    const Matrix& v = nodes_[table].value;
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v.rows()) {
            throw config_error("gather_rows: row id out of range");
        }
    }
    Node n;
    n.op = Op::GatherRows;
    n.a = table;
    n.indices = std::move(ids);
    return push(std::move(n));
}

GradTape::Id GradTape::concat_rows(const std::vector<Id>& parts) {
    check_not_frozen("concat_rows");
    if (parts.empty()) throw config_error("concat_rows: no parts");
    for (Id p : parts) check_id(p, "concat_rows");
    const std::size_t cols = nodes_[parts[0]].value.cols();
    for (Id p : parts) {
        if (nodes_[p].value.cols() != cols) throw config_error("concat_rows: column mismatch");
    }
    Node n;
    n.op = Op::ConcatRows;
    n.inputs = parts;
    return push(std::move(n));
}

GradTape::Id GradTape::concat_cols(const std::vector<Id>& parts) {
    check_not_frozen("concat_cols");
    if (parts.empty()) throw config_error("concat_cols: no parts");
    for (Id p : parts) check_id(p, "concat_cols");
    const std::size_t rows = nodes_[parts[0]].value.rows();
    for (Id p : parts) {
        if (nodes_[p].value.rows() != rows) throw config_error("concat_cols: row mismatch");
    }
    Node n;
    n.op = Op::ConcatCols;
    n.inputs = parts;
    return push(std::move(n));
}

GradTape::Id GradTape::slice_rows(Id a, std::size_t offset, std::size_t count) {
    check_not_frozen("slice_rows");
    check_id(a, "slice_rows");
    if (offset + count > nodes_[a].value.rows()) throw config_error("slice_rows: out of range");
    Node n;
    n.op = Op::SliceRows;
    n.a = a;
    n.offset = offset;
    n.count = count;
    return push(std::move(n));
}

GradTape::Id GradTape::slice_cols(Id a, std::size_t offset, std::size_t count) {
    check_not_frozen("slice_cols");
    check_id(a, "slice_cols");
    if (offset + count > nodes_[a].value.cols()) throw config_error("slice_cols: out of range");
    Node n;
    n.op = Op::SliceCols;
    n.a = a;
    n.offset = offset;
    n.count = count;
    return push(std::move(n));
}

GradTape::Id GradTape::transpose_of(Id a) {
    check_not_frozen("transpose");
    check_id(a, "transpose");
    Node n;
    n.op = Op::Transpose;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::l2_norm(Id a) {
    check_not_frozen("l2_norm");
    check_id(a, "l2_norm");
    Node n;
    n.op = Op::L2Norm;
    n.a = a;
    return push(std::move(n));
}

GradTape::Id GradTape::frob_inner(Id a, Id b) {
    check_not_frozen("frob_inner");
    check_id(a, "frob_inner");
    check_id(b, "frob_inner");
    if (!nodes_[a].value.same_shape(nodes_[b].value)) {
        throw config_error("frob_inner: shape mismatch");
    }
    Node n;
    n.op = Op::FrobInner;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

const Matrix& GradTape::value(Id id) const {
    check_id(id, "value");
    return nodes_[id].value;
}

double GradTape::scalar_value(Id id) const {
    const Matrix& v = value(id);
    if (v.rows() != 1 || v.cols() != 1) throw config_error("scalar_value: node is not 1x1");
    return v(0, 0);
}

bool GradTape::is_trainable(Id id) const {
    check_id(id, "is_trainable");
    return nodes_[id].op == Op::Input && nodes_[id].trainable;
}

void GradTape::set_input(Id id, Matrix value) {
    check_not_frozen("set_input");
    check_id(id, "set_input");
    if (nodes_[id].op != Op::Input) throw config_error("set_input: node is not an input");
    if (!nodes_[id].value.same_shape(value)) throw config_error("set_input: shape mismatch");
    nodes_[id].value = std::move(value);
}

void GradTape::replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op != Op::Input) compute(i);
    }
}

void GradTape::compute(std::size_t idx) {
    Node& n = nodes_[idx];
    const auto& k = kernels::active();
    switch (n.op) {
    case Op::Input:
        break;
    case Op::MatMul: {
        const Matrix& a = nodes_[n.a].value;
        const Matrix& b = nodes_[n.b].value;
        Matrix out(a.rows(), b.cols());
        k.matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
        n.value = std::move(out);
        break;
    }
    case Op::Add: {
        const Matrix& a = nodes_[n.a].value;
        const Matrix& b = nodes_[n.b].value;
        Matrix out(a.rows(), a.cols());
        k.add(a.data(), b.data(), out.data(), a.size());
        n.value = std::move(out);
        break;
    }
    case Op::Sub: {
        const Matrix& a = nodes_[n.a].value;
        const Matrix& b = nodes_[n.b].value;
        Matrix out(a.rows(), a.cols());
        k.sub(a.data(), b.data(), out.data(), a.size());
        n.value = std::move(out);
        break;
    }
    case Op::Scale: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), a.cols());
        k.scale(a.data(), n.scalar, out.data(), a.size());
        n.value = std::move(out);
        break;
    }
    case Op::Hadamard: {
        const Matrix& a = nodes_[n.a].value;
        const Matrix& b = nodes_[n.b].value;
        Matrix out(a.rows(), a.cols());
        k.mul(a.data(), b.data(), out.data(), a.size());
        n.value = std::move(out);
        break;
    }
    case Op::Reciprocal: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = 1.0 / a.data()[i];
        n.value = std::move(out);
        break;
    }
    case Op::Sigmoid: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = sigmoid_value(a.data()[i]);
        n.value = std::move(out);
        break;
    }
    case Op::Gelu: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = gelu_value(a.data()[i]);
        n.value = std::move(out);
        break;
    }
    case Op::LayerNorm: {
        const Matrix& x = nodes_[n.a].value;
        const Matrix& g = nodes_[n.b].value;
        const Matrix& b = nodes_[n.c].value;
        const std::size_t cols = x.cols();
        Matrix out(x.rows(), cols);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double* xr = x.data() + r * cols;
            double mean = kernels::sum(xr, cols) / static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                const double d = xr[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            double* or_ = out.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) {
                or_[j] = (xr[j] - mean) * inv * g(0, j) + b(0, j);
            }
        }
        n.value = std::move(out);
        break;
    }
    case Op::SoftmaxRows: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
            softmax_row(a.data() + r * a.cols(), out.data() + r * a.cols(), a.cols());
        }
        n.value = std::move(out);
        break;
    }
    case Op::CrossEntropy: {
        const Matrix& a = nodes_[n.a].value;
        const std::size_t cols = a.cols();
        double total = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r) {
            const double* xr = a.data() + r * cols;
            double m = xr[0];
            for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += std::exp(xr[j] - m);
            total += m + std::log(s) - xr[n.indices[r]];
        }
        Matrix out(1, 1);
        out(0, 0) = total / static_cast<double>(a.rows());
        n.value = std::move(out);
        break;
    }
    case Op::GatherRows: {
        const Matrix& t = nodes_[n.a].value;
        Matrix out(n.indices.size(), t.cols());
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
            const double* src = t.data() + static_cast<std::size_t>(n.indices[r]) * t.cols();
            double* dst = out.data() + r * t.cols();
            for (std::size_t j = 0; j < t.cols(); ++j) dst[j] = src[j];
        }
        n.value = std::move(out);
        break;
    }
    case Op::ConcatRows: {
        std::size_t rows = 0;
        const std::size_t cols = nodes_[n.inputs[0]].value.cols();
        for (Id p : n.inputs) rows += nodes_[p].value.rows();
        Matrix out(rows, cols);
        std::size_t at = 0;
        for (Id p : n.inputs) {
            const Matrix& v = nodes_[p].value;
            for (std::size_t i = 0; i < v.size(); ++i) out.data()[at * cols + i] = v.data()[i];
            at += v.rows();
        }
        n.value = std::move(out);
        break;
    }
    case Op::ConcatCols: {
        const std::size_t rows = nodes_[n.inputs[0]].value.rows();
        std::size_t cols = 0;
        for (Id p : n.inputs) cols += nodes_[p].value.cols();
        Matrix out(rows, cols);
        std::size_t at = 0;
        for (Id p : n.inputs) {
            const Matrix& v = nodes_[p].value;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < v.cols(); ++j) out(r, at + j) = v(r, j);
            }
            at += v.cols();
        }
        n.value = std::move(out);
        break;
    }
    case Op::SliceRows: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(n.count, a.cols());
        for (std::size_t r = 0; r < n.count; ++r) {
            for (std::size_t j = 0; j < a.cols(); ++j) out(r, j) = a(n.offset + r, j);
        }
        n.value = std::move(out);
        break;
    }
    case Op::SliceCols: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(a.rows(), n.count);
        for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t j = 0; j < n.count; ++j) out(r, j) = a(r, n.offset + j);
        }
        n.value = std::move(out);
        break;
    }
    case Op::Transpose: {
        n.value = transpose(nodes_[n.a].value);
        break;
    }
    case Op::L2Norm: {
        const Matrix& a = nodes_[n.a].value;
        Matrix out(1, 1);
        out(0, 0) = std::sqrt(kernels::sum_squares(a.data(), a.size()));
        n.value = std::move(out);
        break;
    }
    case Op::FrobInner: {
        const Matrix& a = nodes_[n.a].value;
        const Matrix& b = nodes_[n.b].value;
        Matrix out(1, 1);
        out(0, 0) = kernels::dot(a.data(), b.data(), a.size());
        n.value = std::move(out);
        break;
    }
    }
}

std::map<GradTape::Id, Matrix> GradTape::backward(Id loss) const {
    check_id(loss, "backward");
    const Matrix& lv = nodes_[loss].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw config_error("backward: loss node is not scalar");
    }

    std::vector<Matrix> grads(nodes_.size());
    auto accumulate = [&](Id id, const Matrix& g) {
        if (grads[id].empty()) {
            grads[id] = g;
        } else {
            kernels::active().add(grads[id].data(), g.data(), grads[id].data(), g.size());
        }
    };

    grads[loss] = Matrix(1, 1);
    grads[loss](0, 0) = 1.0;

    for (Id id = loss; id >= 0; --id) {
        const Node& n = nodes_[id];
        if (grads[id].empty() || n.op == Op::Input) continue;
        const Matrix& g = grads[id];
        switch (n.op) {
        case Op::Input:
            break;
        case Op::MatMul: {
            accumulate(n.a, matmul_nt(g, nodes_[n.b].value));
            accumulate(n.b, matmul_tn(nodes_[n.a].value, g));
            break;
        }
        case Op::Add: {
            accumulate(n.a, g);
            accumulate(n.b, g);
            break;
        }
        case Op::Sub: {
            accumulate(n.a, g);
            accumulate(n.b, msrs::scale(g, -1.0));
            break;
        }
        case Op::Scale: {
            accumulate(n.a, msrs::scale(g, n.scalar));
            break;
        }
        case Op::Hadamard: {
            accumulate(n.a, msrs::hadamard(g, nodes_[n.b].value));
            accumulate(n.b, msrs::hadamard(g, nodes_[n.a].value));
            break;
        }
        case Op::Reciprocal: {
            // d(1/x) = -1/x^2
            Matrix d = msrs::hadamard(n.value, n.value);
            d = msrs::hadamard(g, d);
            accumulate(n.a, msrs::scale(d, -1.0));
            break;
        }
        case Op::Sigmoid: {
            Matrix d(n.value.rows(), n.value.cols());
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double y = n.value.data()[i];
                d.data()[i] = g.data()[i] * y * (1.0 - y);
            }
            accumulate(n.a, d);
            break;
        }
        case Op::Gelu: {
            const Matrix& x = nodes_[n.a].value;
            Matrix d(x.rows(), x.cols());
            for (std::size_t i = 0; i < d.size(); ++i) {
                d.data()[i] = g.data()[i] * gelu_derivative(x.data()[i]);
            }
            accumulate(n.a, d);
            break;
        }
        case Op::LayerNorm: {
            const Matrix& x = nodes_[n.a].value;
            const Matrix& gain = nodes_[n.b].value;
            const std::size_t cols = x.cols();
            Matrix dx(x.rows(), cols);
            Matrix dgain(1, cols);
            Matrix dbias(1, cols);
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const double* xr = x.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double mean = kernels::sum(xr, cols) / static_cast<double>(cols);
                double var = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double d = xr[j] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(cols);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                // xhat = (x - mean) * inv; dxhat = g * gain
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xhat = (xr[j] - mean) * inv;
                    const double dxhat = gr[j] * gain(0, j);
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    dgain(0, j) += gr[j] * xhat;
                    dbias(0, j) += gr[j];
                }
                mean_dxhat /= static_cast<double>(cols);
                mean_dxhat_xhat /= static_cast<double>(cols);
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xhat = (xr[j] - mean) * inv;
                    const double dxhat = gr[j] * gain(0, j);
                    dx(r, j) = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            accumulate(n.a, dx);
            accumulate(n.b, dgain);
            accumulate(n.c, dbias);
            break;
        }
        case Op::SoftmaxRows: {
            const Matrix& y = n.value;
            Matrix dx(y.rows(), y.cols());
            for (std::size_t r = 0; r < y.rows(); ++r) {
                const double* yr = y.data() + r * y.cols();
                const double* gr = g.data() + r * y.cols();
                const double dot = kernels::dot(gr, yr, y.cols());
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    dx(r, j) = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(n.a, dx);
            break;
        }
        case Op::CrossEntropy: {
            const Matrix& a = nodes_[n.a].value;
            const std::size_t cols = a.cols();
            const double gs = g(0, 0) / static_cast<double>(a.rows());
            Matrix dx(a.rows(), cols);
            std::vector<double> soft(cols);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                softmax_row(a.data() + r * cols, soft.data(), cols);
                for (std::size_t j = 0; j < cols; ++j) dx(r, j) = gs * soft[j];
                dx(r, static_cast<std::size_t>(n.indices[r])) -= gs;
            }
            accumulate(n.a, dx);
            break;
        }
        case Op::GatherRows: {
            const Matrix& t = nodes_[n.a].value;
            Matrix dt(t.rows(), t.cols());
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                double* dst = dt.data() + static_cast<std::size_t>(n.indices[r]) * t.cols();
                const double* src = g.data() + r * t.cols();
                for (std::size_t j = 0; j < t.cols(); ++j) dst[j] += src[j];
            }
            accumulate(n.a, dt);
            break;
        }
        case Op::ConcatRows: {
            std::size_t at = 0;
            for (Id p : n.inputs) {
                const Matrix& v = nodes_[p].value;
                Matrix part(v.rows(), v.cols());
                for (std::size_t i = 0; i < v.size(); ++i) {
                    part.data()[i] = g.data()[at * v.cols() + i];
                }
                accumulate(p, part);
                at += v.rows();
            }
            break;
        }
        case Op::ConcatCols: {
            std::size_t at = 0;
            for (Id p : n.inputs) {
                const Matrix& v = nodes_[p].value;
                Matrix part(v.rows(), v.cols());
                for (std::size_t r = 0; r < v.rows(); ++r) {
                    for (std::size_t j = 0; j < v.cols(); ++j) part(r, j) = g(r, at + j);
                }
                accumulate(p, part);
                at += v.cols();
            }
            break;
        }
        case Op::SliceRows: {
            const Matrix& a = nodes_[n.a].value;
            Matrix da(a.rows(), a.cols());
            for (std::size_t r = 0; r < n.count; ++r) {
                for (std::size_t j = 0; j < a.cols(); ++j) da(n.offset + r, j) = g(r, j);
            }
            accumulate(n.a, da);
            break;
        }
        case Op::SliceCols: {
            const Matrix& a = nodes_[n.a].value;
            Matrix da(a.rows(), a.cols());
            for (std::size_t r = 0; r < a.rows(); ++r) {
                for (std::size_t j = 0; j < n.count; ++j) da(r, n.offset + j) = g(r, j);
            }
            accumulate(n.a, da);
            break;
        }
        case Op::Transpose: {
            accumulate(n.a, transpose(g));
            break;
        }
        case Op::L2Norm: {
            const double norm = n.value(0, 0);
            if (norm == 0.0) throw numeric_error("backward: L2 norm gradient at zero");
            accumulate(n.a, msrs::scale(nodes_[n.a].value, g(0, 0) / norm));
            break;
        }
        case Op::FrobInner: {
            accumulate(n.a, msrs::scale(nodes_[n.b].value, g(0, 0)));
            accumulate(n.b, msrs::scale(nodes_[n.a].value, g(0, 0)));
            break;
        }
        }
    }

    std::map<Id, Matrix> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::Input && nodes_[i].trainable) {
            const Id id = static_cast<Id>(i);
            if (grads[id].empty()) {
                out.emplace(id, Matrix(nodes_[i].value.rows(), nodes_[i].value.cols()));
            } else {
                out.emplace(id, std::move(grads[id]));
            }
        }
    }
    return out;
}

double GradTape::grad_check(Id loss, double epsilon) {
    if (epsilon <= 0.0) throw config_error("grad_check: epsilon must be positive");
    const auto analytic = backward(loss);

    ScopedFreeze freeze(*this);
    double worst = 0.0;
    for (const auto& [id, grad] : analytic) {
        Node& node = nodes_[id];
        for (std::size_t e = 0; e < node.value.size(); ++e) {
            const double orig = node.value.data()[e];
            node.value.data()[e] = orig + epsilon;
            replay();
            const double fp = nodes_[loss].value(0, 0);
            node.value.data()[e] = orig - epsilon;
            replay();
            const double fm = nodes_[loss].value(0, 0);
            node.value.data()[e] = orig;

            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = grad.data()[e];
            const double denom = std::max(1e-12, std::max(std::fabs(a), std::fabs(numeric)));
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    replay();
    return worst;
}

} // namespace msrs
