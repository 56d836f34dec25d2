#pragma once
// Conversions between ComplexSpectrogram chunks and the [N,C,F,T] tensors
// the model consumes.

#include <algorithm>
#include <vector>

#include "dualcodec/common.hpp"
#include "dualcodec/signal.hpp"
#include "dualcodec/tensor.hpp"

namespace dualcodec {

// one chunk -> [C,F,T]; spectrogram storage is already [C][F][T] row-major
template <class T>
Tensor<T> spec_to_tensor(const ComplexSpectrogram<T>& s) {
  Tensor<T> t = Tensor<T>::zeros(
      {int64_t(s.channels_c), int64_t(s.freq_bins), int64_t(s.frames)});
  std::copy(s.data.begin(), s.data.end(), t.data());
  return t;
}

// equally shaped chunks -> [N,C,F,T]
template <class T>
Tensor<T> stack_chunks(const std::vector<ComplexSpectrogram<T>>& chunks) {
  if (chunks.empty()) throw ShapeError("stack_chunks: no chunks");
  const auto& c0 = chunks.front();
  Tensor<T> t = Tensor<T>::zeros({int64_t(chunks.size()),
                                  int64_t(c0.channels_c),
                                  int64_t(c0.freq_bins), int64_t(c0.frames)});
  const int64_t per = int64_t(c0.channels_c) * c0.freq_bins * c0.frames;
  for (size_t i = 0; i < chunks.size(); ++i) {
    const auto& ck = chunks[i];
    if (ck.channels_c != c0.channels_c || ck.freq_bins != c0.freq_bins ||
        ck.frames != c0.frames)
      throw ShapeError("stack_chunks: inconsistent chunk shapes");
    std::copy(ck.data.begin(), ck.data.end(), t.data() + int64_t(i) * per);
  }
  return t;
}

// one [C,F,T] tensor (or one {N==1} leading batch) back to a spectrogram,
// borrowing geometry/metadata from `like`
template <class T>
ComplexSpectrogram<T> tensor_to_spec(const Tensor<T>& t,
                                     const ComplexSpectrogram<T>& like) {
  Tensor<T> v = t;
  if (v.rank() == 4 && v.dim(0) == 1) {
    // single-item batch collapses to the chunk itself
  } else if (v.rank() != 3) {
    throw ShapeError("tensor_to_spec: expected [C,F,T] or [1,C,F,T], got " +
                     shape_str(v.shape()));
  }
  const int64_t c = v.dim(-3), f = v.dim(-2), fr = v.dim(-1);
  if (c != like.channels_c || f != like.freq_bins)
    throw ShapeError("tensor_to_spec: geometry mismatch with template");
  ComplexSpectrogram<T> out;
  out.channels_c = int(c);
  out.freq_bins = int(f);
  out.frames = int(fr);
  out.window_size = like.window_size;
  out.hop_size = like.hop_size;
  out.sample_rate = like.sample_rate;
  out.transformed = like.transformed;
  out.data.assign(v.data(), v.data() + v.numel());
  return out;
}

}  // namespace dualcodec
