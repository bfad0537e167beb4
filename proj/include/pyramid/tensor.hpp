#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pyramid {

// Deterministic PRNG (splitmix64). One u64 of state, identical stream on
// every platform, trivially serializable.
struct RandomSource {
    std::uint64_t state = 0;

    RandomSource() = default;
    explicit RandomSource(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64();
    double uniform();                          // [0, 1)
    double uniform(double lo, double hi);
    double gaussian();                         // standard normal, Box-Muller
    std::uint64_t fork();                      // derived seed for sub-streams
};

enum class Mode { train, infer };
enum class ConvMode { pointwise, full, depthwise };

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor participating in a dynamic reverse-mode graph.
// Graphs are rebuilt on every forward pass; a node's backward_fn reads its
// own grad and accumulates into its parents' grads.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until backward touches this node

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;
    std::string name;
    bool backward_done = false;

    int numel() const { return static_cast<int>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    void ensure_grad();
    void zero_grad();
};

TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
// Glorot-style uniform init; values are rounded through float so that
// checkpoints (32-bit on disk) round-trip bitwise.
TensorPtr uniform_init(std::vector<int> shape, RandomSource& rng, double lo, double hi);

std::string shape_str(const std::vector<int>& shape);

// ---- differentiable ops ----

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr sum(const TensorPtr& x);  // -> scalar [1]

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);      // [MxK]*[KxN]
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);   // [MxK]*[NxK]^T
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);  // x*w + b

// Dilated "same"-padded 1-D convolution over x[T x Cin].
//   full:      w[K x Cin x Cout]
//   pointwise: w[1 x Cin x Cout]
//   depthwise: w[K x C], output channel c uses only input channel c
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, int dilation, ConvMode mode, int stride = 1);
TensorPtr bias_add(const TensorPtr& x, const TensorPtr& b);  // b[D] added to every row

TensorPtr softmax(const TensorPtr& x, int axis);
TensorPtr log_softmax(const TensorPtr& x);  // rows of a 2-D tensor
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta, double eps = 1e-5);

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    long long updates = 0;  // 0 means "infer before any train step"
};
TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     BatchNormState& state, Mode mode, double eps = 1e-5, double momentum = 0.9);

TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr swish(const TensorPtr& x);
TensorPtr glu(const TensorPtr& x);  // halves the last dimension

TensorPtr dropout(const TensorPtr& x, double p, Mode mode, RandomSource& rng);

TensorPtr concat(const std::vector<TensorPtr>& xs, int axis);
TensorPtr slice_cols(const TensorPtr& x, int start, int len);
TensorPtr mean_over_time(const TensorPtr& x, int valid_len = 0);  // [TxD] -> [1xD]
TensorPtr scale_channels(const TensorPtr& x, const TensorPtr& g);  // x[TxC] * g[1xC]
// Adds a large negative constant to score columns >= valid_len (no-op when
// valid_len <= 0 or >= cols). Gradient passes through unmasked entries.
TensorPtr mask_keys(const TensorPtr& scores, int valid_len);

void backward(const TensorPtr& loss);

// Central-difference gradient oracle. Evaluates max relative error
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over at most
// max_coords_per_tensor seeded coordinates per parameter.
double grad_check(const std::function<TensorPtr()>& f, const std::vector<TensorPtr>& params,
                  double step = 1e-5, std::uint64_t seed = 0, int max_coords_per_tensor = 200);

}  // namespace pyramid
