#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace nepa {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Incompatible shapes; the message always carries the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN / Inf where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameter or configuration value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Shapes and storage
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
std::string_view dtype_name(DType dtype);

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

template <class S>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? DType::f32 : DType::f64;
}

/// Invokes `fn.template operator()<S>()` with S = float or double.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

struct TensorNode {
  Shape shape;
  DType dtype = DType::f32;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Handle to a dense row-major array. Copies share the underlying node;
/// use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  /// Converts `values` to `dtype`.
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f64);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  /// Extent of dimension `axis`; negative axes count from the end.
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return nepa::numel(node_->shape); }
  DType dtype() const { return node_->dtype; }

  template <class S>
  std::span<const S> data() const {
    check_dtype(dtype_of<S>());
    return std::get<std::vector<S>>(node_->data);
  }
  /// In-place access. Reserved for initialisation, optimizer updates and
  /// finite-difference probes; never used on tensors already recorded on a
  /// live tape except by those probes.
  template <class S>
  std::span<S> mutable_data() {
    check_dtype(dtype_of<S>());
    return std::get<std::vector<S>>(node_->data);
  }

  double value(std::int64_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return node_->grad.has_value(); }
  /// Gradient as a fresh tensor; zeros if no gradient was accumulated.
  Tensor grad() const;
  template <class S>
  std::span<S> grad_data() {
    check_dtype(dtype_of<S>());
    ensure_grad();
    return std::get<std::vector<S>>(*node_->grad);
  }
  void ensure_grad();
  void zero_grad();
  void clear_grad() { node_->grad.reset(); }

  /// Independent copy of the values; no gradient, not tracked.
  Tensor clone() const;
  Tensor to(DType dtype) const;
  /// Overwrites values with `other`'s (same shape, converts dtype).
  void copy_from(const Tensor& other);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  void check_dtype(DType expected) const;

  std::shared_ptr<TensorNode> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Bitwise equality of shape, dtype and values.
bool bit_equal(const Tensor& a, const Tensor& b);
/// Largest absolute elementwise difference (shapes must match).
double max_abs_diff(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

/// Ordered record of primitive applications. Primitives record themselves
/// into the tape that is active on the calling thread (see TapeScope) when at
/// least one input requires a gradient.
class GradTape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward;
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(std::string op, std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, std::function<void()> backward);

  /// Reverse replay from a scalar `loss`. Gradients of intermediate values
  /// are reset first; gradients of leaves accumulate.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Tape active on this thread, or nullptr.
  static GradTape* active();

 private:
  friend class TapeScope;
  std::vector<Entry> entries_;
};

/// RAII activation of a tape on the current thread. Passing nullptr disables
/// recording for the scope.
class TapeScope {
 public:
  explicit TapeScope(GradTape* tape);
  explicit TapeScope(GradTape& tape) : TapeScope(&tape) {}
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

// ---------------------------------------------------------------------------
// Serialization record: name (u32 length + UTF-8), dtype tag (u8),
// rank (u32 LE), extents (u64 LE each), raw little-endian data.
// ---------------------------------------------------------------------------

void write_tensor_record(std::ostream& out, const std::string& name,
                         const Tensor& tensor);
/// Throws std::runtime_error on truncation or malformed header.
NamedTensor read_tensor_record(std::istream& in);

/// Caps worker threads used by the GEMM backend; 0 reads NEPA_THREADS
/// (default 1).
void set_num_threads(int threads);

}  // namespace nepa
