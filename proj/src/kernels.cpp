#include "msrs/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace msrs::kernels {

namespace {

const Table* select() {
    const char* want = std::getenv("MSRS_KERNELS");
    if (want != nullptr) {
        if (std::strcmp(want, "scalar") == 0) return &scalar_table();
        if (std::strcmp(want, "avx2") == 0 && avx2_table() != nullptr) return avx2_table();
        return &scalar_table();
    }
    if (const Table* t = avx2_table()) return t;
    return &scalar_table();
}

} // namespace

const Table& active() {
    static const Table* chosen = select();
    return *chosen;
}

} // namespace msrs::kernels
