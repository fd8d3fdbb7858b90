#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eees/common.hpp"

namespace eees {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("Mat: data length " + std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Mat m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Mat::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
  }

  static Mat zeros_like(const Mat& other) { return Mat(other.rows_, other.cols_); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool same_shape(const Mat& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Mat& operator+=(const Mat& o) {
    require_same_shape(o, "Mat::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Mat& add_scaled(const Mat& o, double alpha) {
    require_same_shape(o, "Mat::add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * o.data_[i];
    return *this;
  }

  Mat& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Mat&) const = default;

  void require_same_shape(const Mat& o, const char* where) const {
    if (!same_shape(o))
      throw DimensionError(std::string(where) + ": shape " + shape_string() + " vs " +
                           o.shape_string());
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("dot: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) throw DimensionError("log_sum_exp: empty input");
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// Softmax with max subtraction; safe for |logit| well beyond 700.
inline Vec softmax_stable(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax_stable: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (auto& v : out) v /= s;
  return out;
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("euclidean_distance: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("cosine_similarity: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Y = X * W^T + b, with X: n x in, W: out x in, b: 1 x out (may be empty).
inline Mat affine(const Mat& x, const Mat& w, const Mat& b) {
  if (x.cols() != w.cols())
    throw DimensionError("affine: input " + x.shape_string() + " vs weight " + w.shape_string());
  if (!b.empty() && (b.rows() != 1 || b.cols() != w.rows()))
    throw DimensionError("affine: bias " + b.shape_string() + " vs weight " + w.shape_string());
  Mat y(x.rows(), w.rows());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto xr = x.row(n);
    auto yr = y.row(n);
    for (std::size_t o = 0; o < w.rows(); ++o)
      yr[o] = dot(xr, w.row(o)) + (b.empty() ? 0.0 : b(0, o));
  }
  return y;
}

// Backward pass of affine(): accumulates into dw/db and returns dX.
inline Mat affine_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dw, Mat* db) {
  Mat dx(x.rows(), x.cols());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto xr = x.row(n);
    auto dxr = dx.row(n);
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double g = dy(n, o);
      if (g == 0.0) continue;
      auto wr = w.row(o);
      auto dwr = dw.row(o);
      for (std::size_t i = 0; i < xr.size(); ++i) {
        dwr[i] += g * xr[i];
        dxr[i] += g * wr[i];
      }
      if (db) (*db)(0, o) += g;
    }
  }
  return dx;
}

// NaN passes through so a corrupted input still surfaces as a non-finite loss.
inline Mat relu(const Mat& x) {
  Mat y = x;
  for (auto& v : y.data())
    if (v <= 0.0) v = 0.0;
  return y;
}

// Gradient through max(0, .) given the pre-activation; subgradient 0 at 0.
inline Mat relu_backward(const Mat& pre, const Mat& dy) {
  Mat dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(pre.data()[i] > 0.0)) dx.data()[i] = 0.0;
  return dx;
}

// Named parameters with gradient buffers. Insertion order is preserved so
// iteration (and serialization) is deterministic.
class ParamStore {
 public:
  struct Param {
    std::string name;
    Mat value;
    Mat grad;
  };

  Mat& add(const std::string& name, Mat value) {
    if (index_.count(name)) throw ProtocolError("ParamStore: duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    Mat grad = Mat::zeros_like(value);
    params_.push_back({name, std::move(value), std::move(grad)});
    return params_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Mat& value(const std::string& name) const { return at(name).value; }
  Mat& value(const std::string& name) { return at(name).value; }
  const Mat& grad(const std::string& name) const { return at(name).grad; }
  Mat& grad(const std::string& name) { return at(name).grad; }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<Param>& params() noexcept { return params_; }
  const std::vector<Param>& params() const noexcept { return params_; }

  bool operator==(const ParamStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name != o.params_[i].name || params_[i].value != o.params_[i].value)
        return false;
    return true;
  }

 private:
  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("ParamStore: no parameter '" + name + "'");
    return params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("ParamStore: no parameter '" + name + "'");
    return params_[it->second];
  }

  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<std::pair<std::string, double>> max_rel_error;  // per parameter
  std::vector<GradCheckEntry> flagged;
  std::size_t checked = 0;
  // Entries whose +h/-h evaluations left the base region of a piecewise
  // smooth loss (e.g. a ReLU kink was crossed); central differences are not
  // meaningful there.
  std::size_t skipped = 0;
  bool nonfinite = false;
  std::string failure;

  bool passed() const { return flagged.empty() && !nonfinite && failure.empty(); }

  double max_error() const {
    double m = 0.0;
    for (const auto& [_, e] : max_rel_error) m = std::max(m, e);
    return m;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Loss evaluation that also reports which smooth region it landed in.
struct RegionValue {
  double value = 0.0;
  std::uint64_t region = 0;
};

// Compares params.grad (filled by the caller) against central differences of
// loss_fn. loss_fn must not touch params.grad.
inline GradCheckReport finite_difference_check_piecewise(
    const std::function<RegionValue(const ParamStore&)>& loss_fn, ParamStore& params, double h,
    double tol) {
  if (!(h >= 1e-7 && h <= 1e-3))
    throw ProtocolError("finite_difference_check: step h must lie in [1e-7, 1e-3]");
  GradCheckReport report;
  auto eval = [&](RegionValue& out) -> bool {
    try {
      out = loss_fn(params);
    } catch (const std::exception& e) {
      report.failure = e.what();
      return false;
    }
    if (!std::isfinite(out.value)) {
      report.nonfinite = true;
      return false;
    }
    return true;
  };

  RegionValue base;
  if (!eval(base)) return report;

  for (auto& p : params.params()) {
    double worst = 0.0;
    auto& v = p.value.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      RegionValue plus, minus;
      v[i] = saved + h;
      const bool ok_plus = eval(plus);
      v[i] = saved - h;
      const bool ok_minus = ok_plus && eval(minus);
      v[i] = saved;
      if (!ok_plus || !ok_minus) return report;
      if (plus.region != base.region || minus.region != base.region) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * h);
      const double analytic = p.grad.data()[i];
      const double err = relative_error(analytic, numeric);
      ++report.checked;
      worst = std::max(worst, err);
      if (!(err <= tol)) report.flagged.push_back({p.name, i, analytic, numeric, err});
    }
    report.max_rel_error.emplace_back(p.name, worst);
  }
  return report;
}

inline GradCheckReport finite_difference_check(
    const std::function<double(const ParamStore&)>& loss_fn, ParamStore& params, double h,
    double tol) {
  return finite_difference_check_piecewise(
      [&](const ParamStore& ps) { return RegionValue{loss_fn(ps), 0}; }, params, h, tol);
}

}  // namespace eees
