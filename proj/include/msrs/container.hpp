#pragma once

#include <string>

#include "msrs/matrix.hpp"
#include "msrs/steering.hpp"
#include "msrs/subspace.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

// Binary container: magic "MSRS", u32 LE format version, u8 object-kind tag,
// a kind-specific block of i64 LE metadata, then tensor records. Every
// tensor record is [u32 rows, u32 cols, row-major f64 LE payload, u64 LE
// FNV-1a checksum of the payload bytes].
//
// Loading validates the header, every checksum, finiteness, and the stored
// object's invariants (orthonormality for bases, block tiling and
// shared/private orthogonality for aligned subspaces, dimension relations
// for models and checkpoints). Failures name the check that fired.
enum class ObjectKind : unsigned char {
    RawMatrix = 1,
    Basis = 2,
    Aligned = 3,
    Model = 4,
    Checkpoint = 5,
};

void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

void save_basis(const std::string& path, const SubspaceBasis& basis);
SubspaceBasis load_basis(const std::string& path);

void save_aligned(const std::string& path, const AlignedSubspace& aligned);
AlignedSubspace load_aligned(const std::string& path);

void save_model(const std::string& path, const FrozenModel& model);
FrozenModel load_model(const std::string& path);

void save_checkpoint(const std::string& path, const SteeringModule& module);
SteeringModule load_checkpoint(const std::string& path);

} // namespace msrs
