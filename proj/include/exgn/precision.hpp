#pragma once

// Everything that stores or computes model math lives in an inline namespace
// keyed on the scalar width, so the 32-bit training build and the 64-bit
// gradient-check build can be linked into the same binary.
#if defined(EXGN_F64)
#define EXGN_PRECISION_NS f64
#else
#define EXGN_PRECISION_NS f32
#endif

namespace exgn {
inline namespace EXGN_PRECISION_NS {

#if defined(EXGN_F64)
using real = double;
#else
using real = float;
#endif

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
