#pragma once

// Thin RAII wrapper over FFTW3 complex-to-complex transforms. Plans are
// created under a global mutex (the FFTW planner is not thread-safe) with
// FFTW_ESTIMATE so the chosen algorithm, and therefore the roundoff, is
// reproducible run to run. Execution on distinct buffers is re-entrant.

#include <complex>
#include <cstddef>
#include <cstdlib>
#include <mutex>
#include <new>
#include <vector>

#include <fftw3.h>

#include "fermi/errors.hpp"

namespace fermi {

/// 64-byte aligned allocator so FFTW can use its SIMD paths on our buffers.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    void* ptr = std::aligned_alloc(64, ((n * sizeof(T) + 63) / 64) * 64);
    if (!ptr) throw std::bad_alloc();
    return static_cast<T*>(ptr);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using ComplexField = std::vector<std::complex<double>, AlignedAllocator<std::complex<double>>>;

/// In-place forward/backward DFT plans bound to one caller-owned buffer.
class Fft1d {
 public:
  Fft1d(std::complex<double>* data, std::size_t n) : n_(n) {
    auto* ptr = reinterpret_cast<fftw_complex*>(data);
    std::lock_guard<std::mutex> lock(planner_mutex());
    fwd_ = fftw_plan_dft_1d(static_cast<int>(n), ptr, ptr, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_1d(static_cast<int>(n), ptr, ptr, FFTW_BACKWARD, FFTW_ESTIMATE);
    if (!fwd_ || !bwd_) throw Error("Fft1d: plan creation failed");
  }

  ~Fft1d() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
  }

  Fft1d(const Fft1d&) = delete;
  Fft1d& operator=(const Fft1d&) = delete;

  /// Unnormalized forward transform in place.
  void forward() { fftw_execute(fwd_); }

  /// Unnormalized backward transform in place; caller scales by 1/n.
  void backward() { fftw_execute(bwd_); }

  std::size_t size() const { return n_; }

 private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  std::size_t n_;
  fftw_plan fwd_;
  fftw_plan bwd_;
};

}  // namespace fermi
