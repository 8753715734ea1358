#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/hyper.hpp"

namespace fedseq {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Canonical tensor table. The order fixes initialization draws, checkpoint
// payload layout, and optimizer iteration.
struct TensorSpec {
  enum class Kind { kWeight, kBias, kGain };
  std::string name;
  int rows = 0;
  int cols = 0;
  Kind kind = Kind::kWeight;
};

std::vector<TensorSpec> tensor_specs(const HyperParams& hyper);

// Index layout into the canonical tensor vector.
struct ParamLayout {
  static constexpr int kTok = 0, kAge = 1, kYear = 2, kSeg = 3, kPos = 4;
  static constexpr int kEmbGain = 5, kEmbBias = 6;
  static constexpr int kEmbCount = 7;
  // within-layer offsets
  static constexpr int kLn1Gain = 0, kLn1Bias = 1, kWq = 2, kBq = 3, kWk = 4, kBk = 5,
                       kWv = 6, kBv = 7, kWo = 8, kBo = 9, kLn2Gain = 10, kLn2Bias = 11,
                       kW1 = 12, kB1 = 13, kW2 = 14, kB2 = 15;
  static constexpr int kPerLayer = 16;

  int layers = 0;

  explicit ParamLayout(int num_layers = 0) : layers(num_layers) {}
  int layer(int l, int offset) const { return kEmbCount + l * kPerLayer + offset; }
  int mlm_w() const { return kEmbCount + layers * kPerLayer; }
  int mlm_b() const { return mlm_w() + 1; }
  int next_w() const { return mlm_w() + 2; }
  int next_b() const { return mlm_w() + 3; }
  int total() const { return mlm_w() + 4; }
};

// Named-tensor collection for the transformer. Also reused as the container
// for gradients and Adam moments, which are shape-congruent by construction.
template <typename T>
struct ModelParams {
  HyperParams hyper;
  std::vector<Mat<T>> tensors;

  ModelParams() = default;
  explicit ModelParams(const HyperParams& h);  // zero-initialized

  ParamLayout layout() const { return ParamLayout(hyper.layers); }
  Mat<T>& at(int idx) { return tensors[static_cast<std::size_t>(idx)]; }
  const Mat<T>& at(int idx) const { return tensors[static_cast<std::size_t>(idx)]; }

  void set_zero();
  bool congruent_with(const ModelParams& other) const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out(hyper);
    for (std::size_t i = 0; i < tensors.size(); ++i)
      out.tensors[i] = tensors[i].template cast<U>();
    return out;
  }
};

template <typename T>
using ParamGradients = ModelParams<T>;

template <typename T>
struct AdamState {
  ModelParams<T> first_moment;
  ModelParams<T> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const HyperParams& h) : first_moment(h), second_moment(h) {}
};

// Weights ~ N(0, 0.02^2) clamped to +-2 sigma, biases 0, layernorm gains 1.
template <typename T>
ModelParams<T> init_params(const HyperParams& hyper, std::uint64_t seed);

enum class Head { kMlm, kNextVisit };

// Integer lanes of a mini-batch, flattened row-major [rows x len].
struct Batch {
  int rows = 0;
  int len = 0;
  std::vector<std::int32_t> tokens, ages, years, segments, positions;
  std::vector<std::int32_t> mask;

  static Batch from(std::span<const InputSequence> sequences);
  static Batch from(std::span<const InputSequence* const> sequences);
  std::int32_t token(int r, int i) const { return tokens[static_cast<std::size_t>(r) * len + i]; }
};

// Masked positions of an MLM batch, parallel arrays.
struct MlmTargets {
  std::vector<std::int32_t> seq_index;
  std::vector<std::int32_t> position;
  std::vector<std::int32_t> token;

  std::size_t size() const { return seq_index.size(); }
};

// MLM head: per-position logits [rows*len x vocab]. Next-visit head: CLS
// logits [rows x groups].
template <typename T>
Mat<T> forward(const ModelParams<T>& params, const Batch& batch, Head head);

// Mean cross entropy over the masked positions.
template <typename T>
double mlm_loss(const Mat<T>& logits, const MlmTargets& targets, int len);

// Mean element-wise binary cross entropy on sigmoid(logits), log-sum form.
template <typename T>
double nextvisit_loss(const Mat<T>& logits, const Mat<T>& labels);

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  ParamGradients<T> grads;
};

template <typename T>
BackwardResult<T> backward(const ModelParams<T>& params, const Batch& batch,
                           const MlmTargets& targets);

template <typename T>
BackwardResult<T> backward(const ModelParams<T>& params, const Batch& batch,
                           const Mat<T>& labels);

// Bias-corrected Adam. Throws on non-finite gradients, naming the tensor.
template <typename T>
void adam_step(ModelParams<T>& params, const ParamGradients<T>& grads, AdamState<T>& state,
               const HyperParams& hyper);

template <typename T>
double max_abs_diff(const ModelParams<T>& a, const ModelParams<T>& b);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

}  // namespace fedseq
