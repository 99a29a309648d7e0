#include "fsrl/adapter.hpp"

#include <cmath>

namespace fsrl {

const char* variant_name(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::soft_threshold:
      return "soft_threshold";
    case AdapterVariant::relu:
      return "relu";
    case AdapterVariant::jump_relu:
      return "jump_relu";
  }
  return "?";
}

AdapterVariant variant_from_name(const std::string& name) {
  if (name == "soft_threshold") return AdapterVariant::soft_threshold;
  if (name == "relu") return AdapterVariant::relu;
  if (name == "jump_relu") return AdapterVariant::jump_relu;
  throw ConfigError("unknown adapter variant: " + name);
}

SteeringAdapter SteeringAdapter::init(int64_t d, int64_t d_sae, AdapterVariant variant,
                                      Rng& rng) {
  if (d <= 0 || d_sae <= 0) throw ConfigError("adapter: dimensions must be positive");
  SteeringAdapter a;
  a.d = d;
  a.d_sae = d_sae;
  a.variant = variant;
  a.W_a = Tensor::rand_uniform({d_sae, d}, rng, -1e-6, 1e-6, true);
  a.b_a = Tensor::zeros({d_sae}, true);
  a.theta = Tensor::full({d_sae}, 1e-6, true);
  return a;
}

Tensor SteeringAdapter::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != d)
    throw ShapeError(strprintf("adapter forward: expected [m,%lld], got %s",
                               static_cast<long long>(d), fmt_shape(x.shape()).c_str()));
  Tensor z = add(matmul(x, transpose(W_a)), b_a);
  switch (variant) {
    case AdapterVariant::soft_threshold:
      return soft_threshold(z, theta);
    case AdapterVariant::relu:
      return relu(z);
    case AdapterVariant::jump_relu:
      return jump_relu(z, theta);
  }
  throw std::logic_error("unreachable adapter variant");
}

void SteeringAdapter::clamp_theta() {
  for (double& t : theta.values())
    if (t < 0.0) t = 0.0;
}

std::vector<std::pair<std::string, Tensor>> SteeringAdapter::named_params() {
  return {{"W_a", W_a}, {"b_a", b_a}, {"theta", theta}};
}

std::vector<std::pair<std::string, Tensor>> SteeringAdapter::named_params() const {
  return const_cast<SteeringAdapter*>(this)->named_params();
}

uint64_t SteeringAdapter::param_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : named_params()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(p.values(), h);
  }
  return h;
}

void SteeringAdapter::set_trainable(bool trainable) {
  for (auto& [name, p] : named_params()) {
    p.set_requires_grad(trainable);
    if (!trainable) p.drop_grad();
  }
}

SteeringVector adapter_forward_vec(const SteeringAdapter& adapter, std::span<const double> x) {
  if (static_cast<int64_t>(x.size()) != adapter.d)
    throw ShapeError(strprintf("adapter forward: expected %lld-dim activation, got %zu",
                               static_cast<long long>(adapter.d), x.size()));
  NoGradGuard ng;
  Tensor xt = Tensor::from_values({1, adapter.d}, std::vector<double>(x.begin(), x.end()));
  Tensor vt = adapter.forward(xt);
  SteeringVector sv;
  sv.v.assign(vt.values().begin(), vt.values().end());
  sv.l0 = exact_l0(sv.v);
  return sv;
}

namespace {

// W_dec v without the decoder bias: decoding a steering adjustment must not
// re-add b_dec, otherwise v = 0 would shift the stream.
Tensor decode_direction(const SparseAutoencoder& sae, const Tensor& v) {
  if (v.rank() != 2 || v.dim(1) != sae.d_sae)
    throw ShapeError(strprintf("steering: expected [m,%lld] vector, got %s",
                               static_cast<long long>(sae.d_sae),
                               fmt_shape(v.shape()).c_str()));
  return matmul(v, transpose(sae.W_dec));
}

}  // namespace

Tensor apply_steering_direct(const SparseAutoencoder& sae, const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || x.dim(1) != sae.d)
    throw ShapeError(strprintf("steering: activation %s does not match d=%lld",
                               fmt_shape(x.shape()).c_str(), static_cast<long long>(sae.d)));
  if (v.rows() != x.rows())
    throw ShapeError("steering: activation and steering vector row counts differ");
  return add(x, decode_direction(sae, v));
}

Tensor apply_steering_reconstruction(const SparseAutoencoder& sae, const Tensor& x,
                                     const Tensor& v) {
  if (x.rank() != 2 || x.dim(1) != sae.d)
    throw ShapeError(strprintf("steering: activation %s does not match d=%lld",
                               fmt_shape(x.shape()).c_str(), static_cast<long long>(sae.d)));
  if (v.rows() != x.rows())
    throw ShapeError("steering: activation and steering vector row counts differ");
  Tensor f = sae.encode(x);
  Tensor recon = sae.decode(f);            // Decoder(f), bias included
  Tensor steered = sae.decode(add(f, v));  // Decoder(f + v)
  // x + (Decoder(f+v) - Decoder(f)): differencing the two reconstructions
  // first makes v = 0 an exact no-op (identical bits cancel to zero).
  return add(x, sub(steered, recon));
}

double steering_l1(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::fabs(x);
  return s;
}

Tensor steering_l1_t(const Tensor& v) { return sum(abs(v)); }

int64_t exact_l0(std::span<const double> v) {
  int64_t n = 0;
  for (double x : v)
    if (x != 0.0) ++n;
  return n;
}

}  // namespace fsrl
