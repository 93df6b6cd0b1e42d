#include <atomic>
#include <string>

#include "dyllm/error.hpp"
#include "dyllm/kernels.hpp"

namespace dyllm::kernels {
namespace {

const KernelTable* table_for(Backend backend) {
    switch (backend) {
        case Backend::kScalar: return &scalar_table();
        case Backend::kAvx2: return avx2_table();
        case Backend::kAvx512: return avx512_table();
        case Backend::kNeon: return neon_table();
    }
    return nullptr;
}

std::atomic<const KernelTable*>& slot() {
    static std::atomic<const KernelTable*> current{table_for(best_backend())};
    return current;
}

}  // namespace

std::vector<Backend> available_backends() {
    std::vector<Backend> out{Backend::kScalar};
    if (avx2_table() != nullptr) out.push_back(Backend::kAvx2);
    if (avx512_table() != nullptr) out.push_back(Backend::kAvx512);
    if (neon_table() != nullptr) out.push_back(Backend::kNeon);
    return out;
}

Backend best_backend() {
    if (avx512_table() != nullptr) return Backend::kAvx512;
    if (avx2_table() != nullptr) return Backend::kAvx2;
    if (neon_table() != nullptr) return Backend::kNeon;
    return Backend::kScalar;
}

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void set_backend(Backend backend) {
    const KernelTable* table = table_for(backend);
    if (table == nullptr) {
        throw Error(ErrorCode::kInvalidArgument,
                    "kernel backend '" + std::string(backend_name(backend)) +
                        "' is not available on this machine");
    }
    slot().store(table, std::memory_order_release);
}

std::string_view backend_name(Backend backend) {
    switch (backend) {
        case Backend::kScalar: return "scalar";
        case Backend::kAvx2: return "avx2";
        case Backend::kAvx512: return "avx512";
        case Backend::kNeon: return "neon";
    }
    return "unknown";
}

Backend parse_backend(std::string_view name) {
    if (name == "scalar") return Backend::kScalar;
    if (name == "avx2") return Backend::kAvx2;
    if (name == "avx512") return Backend::kAvx512;
    if (name == "neon") return Backend::kNeon;
    if (name == "auto") return best_backend();
    throw Error(ErrorCode::kInvalidArgument, "unknown kernel backend '" + std::string(name) + "'");
}

}  // namespace dyllm::kernels
