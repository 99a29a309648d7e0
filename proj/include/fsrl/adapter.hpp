#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/rng.hpp"
#include "fsrl/sae.hpp"
#include "fsrl/tensor.hpp"

namespace fsrl {

enum class AdapterVariant { soft_threshold, relu, jump_relu };

const char* variant_name(AdapterVariant v);
AdapterVariant variant_from_name(const std::string& name);

// Trainable map from a hook activation to a sparse steering vector over SAE
// features: z = W_a x + b_a, then one of
//   soft_threshold: v_i = sign(z_i) * relu(|z_i| - theta_i)
//   relu:           v_i = relu(z_i)            (theta unused)
//   jump_relu:      v_i = z_i * H(|z_i| - theta_i), H(0) = 0
struct SteeringAdapter {
  Tensor W_a;    // [d_sae, d]
  Tensor b_a;    // [d_sae]
  Tensor theta;  // [d_sae], elementwise >= 0
  AdapterVariant variant = AdapterVariant::soft_threshold;
  int64_t d = 0;
  int64_t d_sae = 0;

  // Near-zero init: W_a ~ U(-1e-6, 1e-6), b_a = 0, theta = 1e-6.
  static SteeringAdapter init(int64_t d, int64_t d_sae, AdapterVariant variant, Rng& rng);

  // x: [m, d] -> v: [m, d_sae].
  Tensor forward(const Tensor& x) const;

  void clamp_theta();  // projects theta onto [0, inf)
  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  uint64_t param_hash() const;
  void set_trainable(bool trainable);
};

// One steering vector with its exact nonzero count (the paper-level k).
struct SteeringVector {
  std::vector<double> v;
  int64_t l0 = 0;
};

SteeringVector adapter_forward_vec(const SteeringAdapter& adapter, std::span<const double> x);

// x + W_dec v. The decoder bias is dropped when decoding a steering vector,
// so v = 0 is an exact no-op.
Tensor apply_steering_direct(const SparseAutoencoder& sae, const Tensor& x, const Tensor& v);

// Decoder(f + v) + (x - Decoder(f)) with f = encode(x) and the full decoder
// of the SAE; algebraically equal to the direct form because b_dec cancels.
Tensor apply_steering_reconstruction(const SparseAutoencoder& sae, const Tensor& x,
                                     const Tensor& v);

double steering_l1(std::span<const double> v);
Tensor steering_l1_t(const Tensor& v);  // sum |v_i|, differentiable

int64_t exact_l0(std::span<const double> v);

}  // namespace fsrl
