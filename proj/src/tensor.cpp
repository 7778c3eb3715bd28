#include "svit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace svit {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("tensor: data size does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw std::invalid_argument("tensor: rows() needs rank 2, got " + shape_str(shape()));
    return n_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw std::invalid_argument("tensor: cols() needs rank 2, got " + shape_str(shape()));
    return n_->shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return n_->value[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return n_->value[r * cols() + c]; }

std::vector<double>& Tensor::grad() {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
    return n_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
    return n_->grad;
}

double Tensor::scalar_value() const {
    if (size() != 1) throw std::invalid_argument("tensor: scalar_value() on non-scalar " + shape_str(shape()));
    return n_->value[0];
}

Tensor transpose_values(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out.at(j, i) = a.at(i, j);
    return out;
}

// ---------------------------------------------------------------------------

Tensor Tape::make(Shape shape, bool requires_grad) {
    return Tensor::zeros(std::move(shape), requires_grad);
}

void Tape::record(std::vector<std::shared_ptr<TensorNode>> touched,
                  std::function<void()> backward) {
    ops_.push_back(Op{std::move(backward), std::move(touched)});
}

void Tape::check_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

void Tape::clear() { ops_.clear(); }

void Tape::backward(const Tensor& root) {
    if (root.size() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape()));
    // Zero every node this tape touches so replaying the same tape is
    // bit-identical.
    std::vector<TensorNode*> nodes;
    nodes.reserve(ops_.size() * 3);
    for (auto& op : ops_)
        for (auto& n : op.touched) nodes.push_back(n.get());
    nodes.push_back(root.node());
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    for (TensorNode* n : nodes) n->grad.assign(n->value.size(), 0.0);

    root.node()->grad.assign(1, 1.0);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
}

// -- op helpers --------------------------------------------------------------

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}
std::vector<double>& grad_of(const Tensor& t) { return const_cast<Tensor&>(t).grad(); }
}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    check_finite(out, "add");
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), out.node_ptr()}, [a, b, out]() {
            auto& g = grad_of(out);
            if (a.requires_grad()) { auto& ga = grad_of(a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
            if (b.requires_grad()) { auto& gb = grad_of(b); for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; }
        });
    return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) - b.at(i);
    check_finite(out, "sub");
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), out.node_ptr()}, [a, b, out]() {
            auto& g = grad_of(out);
            if (a.requires_grad()) { auto& ga = grad_of(a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
            if (b.requires_grad()) { auto& gb = grad_of(b); for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; }
        });
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * b.at(i);
    check_finite(out, "mul");
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), out.node_ptr()}, [a, b, out]() {
            auto& g = grad_of(out);
            if (a.requires_grad()) { auto& ga = grad_of(a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i); }
            if (b.requires_grad()) { auto& gb = grad_of(b); for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i); }
        });
    return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
    Tensor out = make(a.shape(), a.requires_grad());
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * c;
    check_finite(out, "scale");
    if (out.requires_grad())
        record({a.node_ptr(), out.node_ptr()}, [a, out, c]() {
            auto& g = grad_of(out);
            auto& ga = grad_of(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    return out;
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& b) {
    const std::size_t r = x.rows(), c = x.cols();
    if (b.size() != c)
        throw std::invalid_argument("add_rowvec: bias size " + std::to_string(b.size()) +
                                    " does not match cols " + std::to_string(c));
    Tensor out = make(x.shape(), x.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
    check_finite(out, "add_rowvec");
    if (out.requires_grad())
        record({x.node_ptr(), b.node_ptr(), out.node_ptr()}, [x, b, out, r, c]() {
            auto& g = grad_of(out);
            if (x.requires_grad()) { auto& gx = grad_of(x); for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i]; }
            if (b.requires_grad()) {
                auto& gb = grad_of(b);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
            }
        });
    return out;
}

Tensor Tape::scale_rows(const Tensor& x, const Tensor& v) {
    const std::size_t r = x.rows(), c = x.cols();
    if (v.size() != r)
        throw std::invalid_argument("scale_rows: scale size " + std::to_string(v.size()) +
                                    " does not match rows " + std::to_string(r));
    Tensor out = make(x.shape(), x.requires_grad() || v.requires_grad());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) * v.at(i);
    check_finite(out, "scale_rows");
    if (out.requires_grad())
        record({x.node_ptr(), v.node_ptr(), out.node_ptr()}, [x, v, out, r, c]() {
            auto& g = grad_of(out);
            if (x.requires_grad()) {
                auto& gx = grad_of(x);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * v.at(i);
            }
            if (v.requires_grad()) {
                auto& gv = grad_of(v);
                for (std::size_t i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * x.at(i, j);
                    gv[i] += s;
                }
            }
        });
    return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor out = make(std::move(shape), x.requires_grad());
    out.data() = x.data();
    if (out.requires_grad())
        record({x.node_ptr(), out.node_ptr()}, [x, out]() {
            auto& g = grad_of(out);
            auto& gx = grad_of(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    return out;
}

Tensor Tape::transpose(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out = make({c, r}, a.requires_grad());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    if (out.requires_grad())
        record({a.node_ptr(), out.node_ptr()}, [a, out, r, c]() {
            auto& g = grad_of(out);
            auto& ga = grad_of(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        });
    return out;
}

Tensor Tape::gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i : idx)
        if (i >= r) throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range");
    Tensor out = make({idx.size(), c}, x.requires_grad());
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(idx[i], j);
    if (out.requires_grad())
        record({x.node_ptr(), out.node_ptr()}, [x, out, idx = std::move(idx), c]() {
            auto& g = grad_of(out);
            auto& gx = grad_of(x);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += g[i * c + j];
        });
    return out;
}

Tensor Tape::slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    const std::size_t r = x.rows(), c = x.cols();
    if (start + count > c)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," +
                                    std::to_string(start + count) + ") exceeds cols " + std::to_string(c));
    Tensor out = make({r, count}, x.requires_grad());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x.at(i, start + j);
    if (out.requires_grad())
        record({x.node_ptr(), out.node_ptr()}, [x, out, start, count, r, c]() {
            auto& g = grad_of(out);
            auto& gx = grad_of(x);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j) gx[i * c + start + j] += g[i * count + j];
        });
    return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
        rg = rg || p.requires_grad();
    }
    Tensor out = make({r, total}, rg);
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorNode>> touched;
        for (const auto& p : parts) touched.push_back(p.node_ptr());
        touched.push_back(out.node_ptr());
        record(std::move(touched), [parts, out, r, total]() {
            auto& g = grad_of(out);
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = grad_of(p);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j)
                            gp[i * p.cols() + j] += g[i * total + off + j];
                }
                off += p.cols();
            }
        });
    }
    return out;
}

Tensor Tape::concat_rows(const Tensor& a, const Tensor& b) {
    const std::size_t c = a.cols();
    if (b.cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
    const std::size_t ra = a.rows(), rb = b.rows();
    Tensor out = make({ra + rb, c}, a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < ra * c; ++i) out.at(i) = a.at(i);
    for (std::size_t i = 0; i < rb * c; ++i) out.at(ra * c + i) = b.at(i);
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), out.node_ptr()}, [a, b, out, ra, rb, c]() {
            auto& g = grad_of(out);
            if (a.requires_grad()) { auto& ga = grad_of(a); for (std::size_t i = 0; i < ra * c; ++i) ga[i] += g[i]; }
            if (b.requires_grad()) { auto& gb = grad_of(b); for (std::size_t i = 0; i < rb * c; ++i) gb[i] += g[ra * c + i]; }
        });
    return out;
}

Tensor Tape::detach(const Tensor& x) {
    Tensor out = make(x.shape(), false);
    out.data() = x.data();
    return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor out = make({m, n}, a.requires_grad() || b.requires_grad());
    macs_ += static_cast<std::uint64_t>(m) * k * n;
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = pc + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = pa[i * k + kk];
                const double* bk = pb + kk * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
            }
        }
    }
    check_finite(out, "matmul");
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), out.node_ptr()}, [a, b, out, m, k, n]() {
            const auto& g = grad_of(out);
            if (a.requires_grad()) {
                auto& ga = grad_of(a);  // dA = G * B^T
                const double* pb = b.data().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gij * pb[kk * n + j];
                    }
            }
            if (b.requires_grad()) {
                auto& gb = grad_of(b);  // dB = A^T * G
                const double* pa = a.data().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double aik = pa[i * k + kk];
                        for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += aik * g[i * n + j];
                    }
            }
        });
    return out;
}

Tensor Tape::matmul_read(const Tensor& a, const Tensor& b, const Tensor& b_read) {
    require_same_shape(b, b_read, "matmul_read");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (k != b.rows())
        throw std::invalid_argument("matmul_read: inner dims " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor out = make({m, n}, a.requires_grad() || b.requires_grad());
    macs_ += static_cast<std::uint64_t>(m) * k * n;
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = pc + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = pa[i * k + kk];
                const double* bk = pb + kk * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
            }
        }
    }
    check_finite(out, "matmul_read");
    if (out.requires_grad())
        record({a.node_ptr(), b.node_ptr(), b_read.node_ptr(), out.node_ptr()},
               [a, b, b_read, out, m, k, n]() {
                   const auto& g = grad_of(out);
                   if (a.requires_grad()) {
                       auto& ga = grad_of(a);  // dA = G * B_read^T
                       const double* pb = b_read.data().data();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) {
                               const double gij = g[i * n + j];
                               for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gij * pb[kk * n + j];
                           }
                   }
                   if (b.requires_grad()) {
                       auto& gb = grad_of(b);  // dB = A^T * G
                       const double* pa = a.data().data();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t kk = 0; kk < k; ++kk) {
                               const double aik = pa[i * k + kk];
                               for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += aik * g[i * n + j];
                           }
                   }
               });
    return out;
}

Tensor Tape::softmax(const Tensor& x, std::size_t axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw std::invalid_argument("softmax: axis out of range for rank-1 tensor");
    } else if (x.rank() == 2) {
        if (axis > 1) throw std::invalid_argument("softmax: axis out of range for rank-2 tensor");
    } else {
        throw std::invalid_argument("softmax: rank " + std::to_string(x.rank()) + " unsupported");
    }
    // Normalize to row-wise over a [groups x width] view.
    const bool one_d = x.rank() == 1;
    const std::size_t r = one_d ? 1 : x.rows();
    const std::size_t c = one_d ? x.size() : x.cols();
    const bool by_row = one_d || axis == 1;
    const std::size_t groups = by_row ? r : c;
    const std::size_t width = by_row ? c : r;

    Tensor out = make(x.shape(), x.requires_grad());
    auto idx = [&](std::size_t gi, std::size_t wi) {
        return by_row ? gi * c + wi : wi * c + gi;
    };
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double mx = -1e300;
        for (std::size_t wi = 0; wi < width; ++wi) mx = std::max(mx, x.at(idx(gi, wi)));
        double sum = 0.0;
        for (std::size_t wi = 0; wi < width; ++wi) {
            double e = std::exp(x.at(idx(gi, wi)) - mx);
            out.at(idx(gi, wi)) = e;
            sum += e;
        }
        for (std::size_t wi = 0; wi < width; ++wi) out.at(idx(gi, wi)) /= sum;
    }
    check_finite(out, "softmax");
    if (out.requires_grad())
        record({x.node_ptr(), out.node_ptr()}, [x, out, groups, width, idx]() {
            auto& g = grad_of(out);
            auto& gx = grad_of(x);
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double dot = 0.0;
                for (std::size_t wi = 0; wi < width; ++wi) dot += g[idx(gi, wi)] * out.at(idx(gi, wi));
                for (std::size_t wi = 0; wi < width; ++wi) {
                    const std::size_t ii = idx(gi, wi);
                    gx[ii] += out.at(ii) * (g[ii] - dot);
                }
            }
        });
    return out;
}

Tensor Tape::gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out = make(x.shape(), x.requires_grad());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.at(i);
        out.at(i) = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    check_finite(out, "gelu");
    if (out.requires_grad())
        record({x.node_ptr(), out.node_ptr()}, [x, out]() {
            auto& g = grad_of(out);
            auto& gx = grad_of(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = x.at(i);
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    return out;
}

Tensor Tape::layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c)
        throw std::invalid_argument("layernorm: gamma/beta size must equal cols");
    Tensor out = make(x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    std::vector<double> means(r), inv_stds(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        means[i] = mean;
        inv_stds[i] = inv_std;
        for (std::size_t j = 0; j < c; ++j)
            out.at(i, j) = (x.at(i, j) - mean) * inv_std * gamma.at(j) + beta.at(j);
    }
    check_finite(out, "layernorm");
    if (out.requires_grad())
        record({x.node_ptr(), gamma.node_ptr(), beta.node_ptr(), out.node_ptr()},
               [x, gamma, beta, out, r, c, means = std::move(means), inv_stds = std::move(inv_stds)]() {
                   auto& g = grad_of(out);
                   for (std::size_t i = 0; i < r; ++i) {
                       const double mean = means[i], inv_std = inv_stds[i];
                       // x_hat and row reductions
                       double sum_gy = 0.0, sum_gy_xhat = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                           const double xhat = (x.at(i, j) - mean) * inv_std;
                           const double gy = g[i * c + j] * gamma.at(j);
                           sum_gy += gy;
                           sum_gy_xhat += gy * xhat;
                       }
                       if (x.requires_grad()) {
                           auto& gx = grad_of(x);
                           const double invc = 1.0 / static_cast<double>(c);
                           for (std::size_t j = 0; j < c; ++j) {
                               const double xhat = (x.at(i, j) - mean) * inv_std;
                               const double gy = g[i * c + j] * gamma.at(j);
                               gx[i * c + j] += inv_std * (gy - invc * sum_gy - invc * xhat * sum_gy_xhat);
                           }
                       }
                       if (gamma.requires_grad()) {
                           auto& gg = grad_of(gamma);
                           for (std::size_t j = 0; j < c; ++j) {
                               const double xhat = (x.at(i, j) - mean) * inv_std;
                               gg[j] += g[i * c + j] * xhat;
                           }
                       }
                       if (beta.requires_grad()) {
                           auto& gb = grad_of(beta);
                           for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                       }
                   }
               });
    return out;
}

Tensor Tape::masked_weight(const Tensor& w, const Tensor& m) {
    require_same_shape(w, m, "masked_weight");
    for (double v : m.data())
        if (v != 0.0 && v != 1.0)
            throw std::invalid_argument("masked_weight: mask entries must be 0 or 1");
    Tensor out = make(w.shape(), w.requires_grad());
    for (std::size_t i = 0; i < w.size(); ++i) out.at(i) = w.at(i) * m.at(i);
    if (out.requires_grad())
        record({w.node_ptr(), m.node_ptr(), out.node_ptr()}, [w, m, out]() {
            // out.grad is the dense gradient of the effective weight; the
            // stored weight only receives the masked part.
            auto& g = grad_of(out);
            auto& gw = grad_of(w);
            for (std::size_t i = 0; i < g.size(); ++i) gw[i] += g[i] * m.at(i);
        });
    return out;
}

Tensor Tape::cross_entropy_label_smoothed(const Tensor& logits, std::size_t target, double eps) {
    const std::size_t classes = logits.size();
    if (logits.rank() == 2 && logits.rows() != 1)
        throw std::invalid_argument("cross_entropy: expected a single row of logits");
    if (target >= classes)
        throw std::invalid_argument("cross_entropy: target " + std::to_string(target) +
                                    " out of range for " + std::to_string(classes) + " classes");
    // log-softmax
    double mx = -1e300;
    for (std::size_t i = 0; i < classes; ++i) mx = std::max(mx, logits.at(i));
    double sum = 0.0;
    for (std::size_t i = 0; i < classes; ++i) sum += std::exp(logits.at(i) - mx);
    const double logz = mx + std::log(sum);
    // q_c = (1-eps)*[c==target] + eps/C
    double loss = 0.0;
    const double unif = eps / static_cast<double>(classes);
    for (std::size_t i = 0; i < classes; ++i) {
        double q = unif + (i == target ? 1.0 - eps : 0.0);
        loss -= q * (logits.at(i) - logz);
    }
    Tensor out = Tensor::scalar(loss, logits.requires_grad());
    check_finite(out, "cross_entropy");
    if (out.requires_grad())
        record({logits.node_ptr(), out.node_ptr()}, [logits, out, target, eps, classes, logz, unif]() {
            const double g = grad_of(out)[0];
            auto& gl = grad_of(logits);
            for (std::size_t i = 0; i < classes; ++i) {
                const double p = std::exp(logits.at(i) - logz);
                const double q = unif + (i == target ? 1.0 - eps : 0.0);
                gl[i] += g * (p - q);
            }
        });
    return out;
}

}  // namespace svit
