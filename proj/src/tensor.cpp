#include "nepa/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

extern "C" void openblas_set_num_threads(int);

namespace nepa {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view dtype_name(DType dtype) {
  return dtype == DType::f32 ? "f32" : "f64";
}

namespace {

Buffer make_buffer(DType dtype, std::int64_t n, double fill = 0.0) {
  if (dtype == DType::f32)
    return std::vector<float>(static_cast<std::size_t>(n), static_cast<float>(fill));
  return std::vector<double>(static_cast<std::size_t>(n), fill);
}

std::shared_ptr<TensorNode> make_node(Shape shape, DType dtype, Buffer data) {
  for (auto e : shape)
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->dtype = dtype;
  node->data = std::move(data);
  return node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) {
  auto n = nepa::numel(shape);
  return Tensor(make_node(std::move(shape), dtype, make_buffer(dtype, n)));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  auto n = nepa::numel(shape);
  return Tensor(make_node(std::move(shape), dtype, make_buffer(dtype, n, value)));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  if (nepa::numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), DType::f32, std::move(values)));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  if (nepa::numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), DType::f64, std::move(values)));
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (dtype == DType::f64)
    return from_vector(std::move(shape), std::vector<double>(values.begin(), values.end()));
  std::vector<float> v(values.size());
  std::transform(values.begin(), values.end(), v.begin(),
                 [](double x) { return static_cast<float>(x); });
  return from_vector(std::move(shape), std::move(v));
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

std::int64_t Tensor::dim(int axis) const {
  int r = rank();
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(a)];
}

void Tensor::check_dtype(DType expected) const {
  if (node_->dtype != expected)
    throw std::invalid_argument("tensor dtype is " + std::string(dtype_name(node_->dtype)) +
                                ", requested " + std::string(dtype_name(expected)));
}

double Tensor::value(std::int64_t flat_index) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(flat_index)); },
                    node_->data);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return value(0);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    node_->data);
}

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

void Tensor::ensure_grad() {
  if (!node_->grad) node_->grad = make_buffer(node_->dtype, numel());
}

void Tensor::zero_grad() {
  if (!node_->grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, *node_->grad);
}

Tensor Tensor::grad() const {
  if (!node_->grad) return zeros(shape(), dtype());
  return Tensor(make_node(shape(), dtype(), *node_->grad));
}

Tensor Tensor::clone() const { return Tensor(make_node(shape(), dtype(), node_->data)); }

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  return from_values(shape(), to_vector(), target);
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape())
    throw ShapeError("copy_from: shape " + shape_str(other.shape()) + " into " +
                     shape_str(shape()));
  if (other.dtype() == dtype()) {
    node_->data = other.node_->data;
    return;
  }
  auto vals = other.to_vector();
  std::visit(
      [&](auto& v) {
        using S = typename std::decay_t<decltype(v)>::value_type;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(vals[i]);
      },
      node_->data);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::visit(
      [&](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b.node()->data);
        return va.empty() ||
               std::memcmp(va.data(), vb.data(), va.size() * sizeof(va[0])) == 0;
      },
      a.node()->data);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto va = a.to_vector();
  auto vb = b.to_vector();
  double m = 0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape* GradTape::active() { return g_active_tape; }

TapeScope::TapeScope(GradTape* tape) : previous_(g_active_tape) { g_active_tape = tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void GradTape::record(std::string op, std::vector<std::shared_ptr<TensorNode>> inputs,
                      std::shared_ptr<TensorNode> output, std::function<void()> backward) {
  entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  for (auto& e : entries_) e.output->grad.reset();
  Tensor root = loss;
  root.ensure_grad();
  std::visit([](auto& g) { g[0] = 1; }, *root.node()->grad);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad) it->backward();
  }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

template <class U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U)))
    throw std::runtime_error("truncated tensor record");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_tensor_record(std::ostream& out, const std::string& name, const Tensor& tensor) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto e : tensor.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
  dispatch(tensor.dtype(), [&]<class S>() {
    using U = std::conditional_t<std::is_same_v<S, float>, std::uint32_t, std::uint64_t>;
    for (S v : tensor.data<S>()) put_le<U>(out, std::bit_cast<U>(v));
  });
}

NamedTensor read_tensor_record(std::istream& in) {
  constexpr std::uint32_t kMaxName = 1u << 16;
  constexpr std::uint32_t kMaxRank = 16;
  auto name_len = get_le<std::uint32_t>(in);
  if (name_len > kMaxName) throw std::runtime_error("tensor record name too long");
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len)) throw std::runtime_error("truncated tensor record");
  auto tag = get_le<std::uint8_t>(in);
  if (tag > 1) throw std::runtime_error("unknown dtype tag " + std::to_string(tag) + " for '" + name + "'");
  auto dtype = static_cast<DType>(tag);
  auto rank = get_le<std::uint32_t>(in);
  if (rank > kMaxRank) throw std::runtime_error("implausible rank for '" + name + "'");
  Shape shape(rank);
  for (auto& e : shape) {
    auto v = get_le<std::uint64_t>(in);
    if (v > (1ull << 40)) throw std::runtime_error("implausible extent for '" + name + "'");
    e = static_cast<std::int64_t>(v);
  }
  Tensor t = Tensor::zeros(shape, dtype);
  dispatch(dtype, [&]<class S>() {
    using U = std::conditional_t<std::is_same_v<S, float>, std::uint32_t, std::uint64_t>;
    for (S& v : t.mutable_data<S>()) v = std::bit_cast<S>(get_le<U>(in));
  });
  return {std::move(name), std::move(t)};
}

void set_num_threads(int threads) {
  if (threads <= 0) {
    threads = 1;
    if (const char* env = std::getenv("NEPA_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) threads = v;
    }
  }
  openblas_set_num_threads(threads);
}

}  // namespace nepa
