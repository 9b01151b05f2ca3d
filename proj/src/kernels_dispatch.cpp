#include "unidet/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace unidet::kernels {
namespace {

const Kernels& resolve() {
  if (const char* env = std::getenv("UNIDET_KERNELS")) {
    const std::string want(env);
    if (want == "scalar") return scalar();
    if (want == "avx2") {
      if (const Kernels* k = avx2()) return *k;
      throw std::runtime_error(
          "UNIDET_KERNELS=avx2 requested but AVX2 is unavailable on this CPU");
    }
    throw std::runtime_error("UNIDET_KERNELS must be 'scalar' or 'avx2', got '" +
                             want + "'");
  }
  if (const Kernels* k = avx2()) return *k;
  return scalar();
}

}  // namespace

const Kernels& active() {
  static const Kernels& chosen = resolve();
  return chosen;
}

}  // namespace unidet::kernels
