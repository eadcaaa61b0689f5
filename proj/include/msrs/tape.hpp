#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "msrs/matrix.hpp"

namespace msrs {

// Reverse-mode gradient tape over Matrix values.
//
// Nodes are appended in topological order (every input id precedes its
// consumer) and each node saves its forward value, so replay() reproduces
// the recording bit-exactly. backward() is a read-only pass; grad_check()
// perturbs input values, replays, and restores.
//
// Op set: matmul, add/sub, scalar-multiply, hadamard, reciprocal, sigmoid,
// GELU, layer-norm, row softmax, cross-entropy, row gather (embedding),
// row/col concat and slice, transpose, L2 norm, Frobenius inner product.
class GradTape {
public:
    using Id = std::int32_t;

    enum class Op : std::uint8_t {
        Input,
        MatMul,
        Add,
        Sub,
        Scale,
        Hadamard,
        Reciprocal,
        Sigmoid,
        Gelu,
        LayerNorm,
        SoftmaxRows,
        CrossEntropy,
        GatherRows,
        ConcatRows,
        ConcatCols,
        SliceRows,
        SliceCols,
        Transpose,
        L2Norm,
        FrobInner,
    };

    Id input(Matrix value, bool trainable = false);

    Id matmul(Id a, Id b);
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id scale(Id a, double s);
    Id hadamard(Id a, Id b);
    Id reciprocal(Id a);
    Id sigmoid(Id a);
    Id gelu(Id a);
    // Row-wise normalization of x with per-column gain/bias (1 x cols).
    Id layer_norm(Id x, Id gain, Id bias);
    Id softmax_rows(Id a);
    // Mean over rows of -log softmax(row)[gold[row]]; scalar output.
    Id cross_entropy(Id logits, std::vector<int> gold);
    Id gather_rows(Id table, std::vector<int> ids);
    Id concat_rows(const std::vector<Id>& parts);
    Id concat_cols(const std::vector<Id>& parts);
    Id slice_rows(Id a, std::size_t offset, std::size_t count);
    Id slice_cols(Id a, std::size_t offset, std::size_t count);
    Id transpose_of(Id a);
    Id l2_norm(Id a);
    Id frob_inner(Id a, Id b);

    const Matrix& value(Id id) const;
    double scalar_value(Id id) const;
    bool is_trainable(Id id) const;
    std::size_t node_count() const { return nodes_.size(); }

    // Overwrite an Input node's value (shape-preserving). Downstream values
    // are stale until replay().
    void set_input(Id id, Matrix value);

    // Recompute every non-input node in recording order.
    void replay();

    // d loss / d input for every *trainable* input id. Disconnected trainable
    // inputs map to exact-zero matrices. Loss must be 1x1.
    std::map<Id, Matrix> backward(Id loss) const;

    // Worst relative error between backward() and central finite differences
    // over every entry of every trainable input. Denominator floored at 1e-12.
    // The tape is frozen while the check runs; restores all values on exit.
    double grad_check(Id loss, double epsilon);

    // Blocks node creation and input mutation while alive.
    class ScopedFreeze {
    public:
        explicit ScopedFreeze(GradTape& t) : tape_(t) { tape_.frozen_ = true; }
        ~ScopedFreeze() { tape_.frozen_ = false; }
        ScopedFreeze(const ScopedFreeze&) = delete;
        ScopedFreeze& operator=(const ScopedFreeze&) = delete;

    private:
        GradTape& tape_;
    };

private:
    struct Node {
        Op op = Op::Input;
        Id a = -1;
        Id b = -1;
        Id c = -1;                  // third input (layer_norm bias)
        std::vector<Id> inputs;     // concat parts
        std::vector<int> indices;   // gather ids / cross-entropy gold
        double scalar = 0.0;        // scale factor
        std::size_t offset = 0, count = 0;
        bool trainable = false;
        Matrix value;
    };

    Id push(Node n);
    void compute(std::size_t idx);
    void check_id(Id id, const char* op) const;
    void check_not_frozen(const char* op) const;

    std::vector<Node> nodes_;
    bool frozen_ = false;
};

} // namespace msrs
