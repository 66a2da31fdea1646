// SPDX-License-Identifier: Apache-2.0

#include "saldet/parallel.hpp"

#include <cstdlib>
#include <string>

#include <omp.h>

namespace saldet {

int worker_threads() {
  int n = omp_get_max_threads();
  if (const char* env = std::getenv("SALDET_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1 && cap < n) n = cap;
    } catch (const std::exception&) {
      // unparsable value: ignore the cap
    }
  }
  return n < 1 ? 1 : n;
}

ThreadLimit::ThreadLimit(int threads) : previous_(omp_get_max_threads()) {
  omp_set_num_threads(threads < 1 ? 1 : threads);
}

ThreadLimit::~ThreadLimit() { omp_set_num_threads(previous_); }

}  // namespace saldet
