// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace saldet {

/// OpenMP worker count, capped by the SALDET_THREADS environment variable.
int worker_threads();

/// Scoped override of the OpenMP thread count.
class ThreadLimit {
 public:
  explicit ThreadLimit(int threads);
  ~ThreadLimit();
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  int previous_;
};

}  // namespace saldet
