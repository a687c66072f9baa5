#include "rpf/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace rpf::kern {

const Ops& active_ops() {
  static const Ops* chosen = [] {
    const char* force = std::getenv("RPF_KERNELS");
    if (force != nullptr) {
      if (std::strcmp(force, "scalar") == 0) return &scalar_ops();
      if (std::strcmp(force, "avx2") == 0 && avx2_ops() != nullptr)
        return avx2_ops();
    }
    if (const Ops* simd = avx2_ops()) return simd;
    return &scalar_ops();
  }();
  return *chosen;
}

}  // namespace rpf::kern
