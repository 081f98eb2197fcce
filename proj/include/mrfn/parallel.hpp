#pragma once

namespace mrfn {

/// Worker count used by kernels that split over independent batch items.
/// 1 is the reference mode: results are bitwise reproducible.
void set_num_threads(int n);
int num_threads();

}  // namespace mrfn
