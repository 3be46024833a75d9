#include "lpn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "lpn/error.hpp"

namespace lpn::ops {

namespace {

using detail::make_result;

double fault(const char* op) {
    return testing::gradient_fault_active(op) ? 1.0 + 1e-2 : 1.0;
}

Node& parent(Node& out, std::size_t i) { return *out.parents[i]; }

bool wants(Node& out, std::size_t i) { return out.parents[i]->requires_grad; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

template <class F, class G>
Tensor unary(const char* op, const Tensor& a, F forward, G derivative) {
    auto in = a.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
    return make_result(op, a.shape(), std::move(out), {a}, [op, derivative](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        const double f = fault(op);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += f * o.grad[i] * derivative(p.value[i], o.value[i]);
        }
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& o) {
        const double f = fault("add");
        for (std::size_t k = 0; k < 2; ++k) {
            if (!wants(o, k)) continue;
            auto& g = parent(o, k).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& o) {
        const double f = fault("sub");
        if (wants(o, 0)) {
            auto& g = parent(o, 0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i];
        }
        if (wants(o, 1)) {
            auto& g = parent(o, 1).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= f * o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& o) {
        const double f = fault("mul");
        Node& pa = parent(o, 0);
        Node& pb = parent(o, 1);
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i] * pa.value[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return factor * x; },
        [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& a) {
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](double x) {
            constexpr double lo = std::numeric_limits<double>::min();
            constexpr double hi = 1.0 - 0x1.0p-53;
            if (x >= 0.0) return std::min(1.0 / (1.0 + std::exp(-x)), hi);
            const double e = std::exp(x);
            return std::max(e / (1.0 + e), lo);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.values()) {
        if (!(v > 0.0)) throw DegenerateInputError("log: non-positive input");
    }
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_result("sum", Shape{}, {s}, {a}, [](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double g0 = fault("sum") * o.grad[0];
        for (double& g : p.grad_buffer()) g += g0;
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean: empty tensor");
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_result("mean", Shape{}, {s / n}, {a}, [n](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double g0 = fault("mean") * o.grad[0] / n;
        for (double& g : p.grad_buffer()) g += g0;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = x[i * k + p];
            const double* brow = y.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
    return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& o) {
        const double f = fault("matmul");
        Node& pa = parent(o, 0);
        Node& pb = parent(o, 1);
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                const double* go = o.grad.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = pb.value.data() + p * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += go[j] * brow[j];
                    g[i * k + p] += f * s;
                }
            }
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                const double* go = o.grad.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = f * pa.value[i * k + p];
                    double* grow = g.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) grow[j] += s * go[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return make_result("transpose", Shape{n, m}, std::move(out), {a}, [m, n](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("transpose");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += f * o.grad[j * m + i];
    });
}

Tensor add_row_vector(const Tensor& a, const Tensor& row) {
    require_rank(a, 2, "add_row_vector");
    require_rank(row, 1, "add_row_vector");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row.dim(0) != n) {
        throw DimensionError("add_row_vector: " + shape_str(a.shape()) + " + " +
                             shape_str(row.shape()));
    }
    auto x = a.values();
    auto r = row.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
    return make_result("add_row_vector", a.shape(), std::move(out), {a, row}, [m, n](Node& o) {
        const double f = fault("add_row_vector");
        if (wants(o, 0)) {
            auto& g = parent(o, 0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i];
        }
        if (wants(o, 1)) {
            auto& g = parent(o, 1).grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += f * o.grad[i * n + j];
        }
    });
}

Tensor mul_row_vector(const Tensor& a, const Tensor& row) {
    require_rank(a, 2, "mul_row_vector");
    require_rank(row, 1, "mul_row_vector");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row.dim(0) != n) {
        throw DimensionError("mul_row_vector: " + shape_str(a.shape()) + " * " +
                             shape_str(row.shape()));
    }
    auto x = a.values();
    auto r = row.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * r[j];
    return make_result("mul_row_vector", a.shape(), std::move(out), {a, row}, [m, n](Node& o) {
        const double f = fault("mul_row_vector");
        Node& pa = parent(o, 0);
        Node& pr = parent(o, 1);
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += f * o.grad[i * n + j] * pr.value[j];
        }
        if (pr.requires_grad) {
            auto& g = pr.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += f * o.grad[i * n + j] * pa.value[i * n + j];
        }
    });
}

Tensor mul_col_vector(const Tensor& a, const Tensor& col) {
    require_rank(a, 2, "mul_col_vector");
    require_rank(col, 1, "mul_col_vector");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (col.dim(0) != m) {
        throw DimensionError("mul_col_vector: " + shape_str(a.shape()) + " * " +
                             shape_str(col.shape()));
    }
    auto x = a.values();
    auto c = col.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * c[i];
    return make_result("mul_col_vector", a.shape(), std::move(out), {a, col}, [m, n](Node& o) {
        const double f = fault("mul_col_vector");
        Node& pa = parent(o, 0);
        Node& pc = parent(o, 1);
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += f * o.grad[i * n + j] * pc.value[i];
        }
        if (pc.requires_grad) {
            auto& g = pc.grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += o.grad[i * n + j] * pa.value[i * n + j];
                g[i] += f * s;
            }
        }
    });
}

Tensor row_means(const Tensor& a) {
    require_rank(a, 2, "row_means");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (n == 0) throw DimensionError("row_means: zero columns");
    auto x = a.values();
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[i * n + j];
        out[i] = s / static_cast<double>(n);
    }
    return make_result("row_means", Shape{m}, std::move(out), {a}, [m, n](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("row_means");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const double gi = f * o.grad[i] / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gi;
        }
    });
}

Tensor col_means(const Tensor& a) {
    require_rank(a, 2, "col_means");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (m == 0) throw DimensionError("col_means: zero rows");
    auto x = a.values();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
    for (double& v : out) v /= static_cast<double>(m);
    return make_result("col_means", Shape{n}, std::move(out), {a}, [m, n](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("col_means") / static_cast<double>(m);
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += f * o.grad[j];
    });
}

Tensor softmax_rows(const Tensor& a, double scale) {
    require_rank(a, 2, "softmax_rows");
    if (!std::isfinite(scale)) throw ContractError("softmax_rows: non-finite scale");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (n == 0) throw DimensionError("softmax_rows: empty rows");
    auto x = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double* yr = out.data() + i * n;
        double mx = scale * xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, scale * xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(scale * xr[j] - mx);
            z += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
    }
    return make_result("softmax_rows", a.shape(), std::move(out), {a}, [m, n, scale](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("softmax_rows");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = o.value.data() + i * n;
            const double* gy = o.grad.data() + i * n;
            double dotp = 0.0;
            for (std::size_t j = 0; j < n; ++j) dotp += gy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += f * scale * y[j] * (gy[j] - dotp);
        }
    });
}

Tensor log_softmax_rows(const Tensor& a, double scale) {
    require_rank(a, 2, "log_softmax_rows");
    if (!std::isfinite(scale)) throw ContractError("log_softmax_rows: non-finite scale");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (n == 0) throw DimensionError("log_softmax_rows: empty rows");
    auto x = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double mx = scale * xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, scale * xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(scale * xr[j] - mx);
        const double log_z = std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (scale * xr[j] - mx) - log_z;
    }
    return make_result("log_softmax_rows", a.shape(), std::move(out), {a}, [m, n, scale](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("log_softmax_rows");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const double* l = o.value.data() + i * n;
            const double* gl = o.grad.data() + i * n;
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += gl[j];
            for (std::size_t j = 0; j < n; ++j) {
                g[i * n + j] += f * scale * (gl[j] - std::exp(l[j]) * total);
            }
        }
    });
}

Tensor softmax(const Tensor& v, double scale) {
    require_rank(v, 1, "softmax");
    if (v.dim(0) == 0) throw DimensionError("softmax: empty input");
    return reshape(softmax_rows(reshape(v, {1, v.dim(0)}), scale), {v.dim(0)});
}

Tensor normalize_rows(const Tensor& a) {
    require_rank(a, 2, "normalize_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.values();
    std::vector<double> out(m * n);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
        if (!(s > 0.0)) {
            throw DegenerateInputError("normalize_rows: row " + std::to_string(i) +
                                       " has zero norm");
        }
        norms[i] = std::sqrt(s);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norms[i];
    }
    return make_result("normalize_rows", a.shape(), std::move(out), {a},
                       [m, n, norms = std::move(norms)](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = fault("normalize_rows");
                           auto& g = p.grad_buffer();
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* y = o.value.data() + i * n;
                               const double* gy = o.grad.data() + i * n;
                               double d = 0.0;
                               for (std::size_t j = 0; j < n; ++j) d += y[j] * gy[j];
                               for (std::size_t j = 0; j < n; ++j) {
                                   g[i * n + j] += f * (gy[j] - y[j] * d) / norms[i];
                               }
                           }
                       });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
    require_rank(a, 2, "layer_norm_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (n == 0) throw DimensionError("layer_norm_rows: empty rows");
    auto x = a.values();
    std::vector<double> out(m * n);
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[i * n + j] - mu) * (x[i * n + j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
    }
    return make_result("layer_norm_rows", a.shape(), std::move(out), {a},
                       [m, n, inv_std = std::move(inv_std)](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = fault("layer_norm_rows");
                           auto& g = p.grad_buffer();
                           const double dn = static_cast<double>(n);
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* y = o.value.data() + i * n;
                               const double* gy = o.grad.data() + i * n;
                               double mg = 0.0, mgy = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   mg += gy[j];
                                   mgy += gy[j] * y[j];
                               }
                               mg /= dn;
                               mgy /= dn;
                               for (std::size_t j = 0; j < n; ++j) {
                                   g[i * n + j] += f * inv_std[i] * (gy[j] - mg - y[j] * mgy);
                               }
                           }
                       });
}

Tensor cosine(const Tensor& u, const Tensor& v) {
    require_rank(u, 1, "cosine");
    require_same_shape(u, v, "cosine");
    auto x = u.values();
    auto y = v.values();
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    if (!(xx > 0.0) || !(yy > 0.0)) {
        throw DegenerateInputError("cosine: zero-norm input vector");
    }
    const double nx = std::sqrt(xx), ny = std::sqrt(yy);
    const double c = std::clamp(xy / (nx * ny), -1.0, 1.0);
    return make_result("cosine", Shape{}, {c}, {u, v}, [nx, ny](Node& o) {
        const double f = fault("cosine") * o.grad[0];
        const double c = o.value[0];
        Node& pu = parent(o, 0);
        Node& pv = parent(o, 1);
        const std::size_t d = pu.value.size();
        if (pu.requires_grad) {
            auto& g = pu.grad_buffer();
            for (std::size_t i = 0; i < d; ++i) {
                g[i] += f * (pv.value[i] / (nx * ny) - c * pu.value[i] / (nx * nx));
            }
        }
        if (pv.requires_grad) {
            auto& g = pv.grad_buffer();
            for (std::size_t i = 0; i < d; ++i) {
                g[i] += f * (pu.value[i] / (nx * ny) - c * pv.value[i] / (ny * ny));
            }
        }
    });
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "cosine_matrix");
    require_rank(b, 2, "cosine_matrix");
    if (a.dim(1) != b.dim(1)) {
        throw DimensionError("cosine_matrix: widths differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    return matmul(normalize_rows(a), transpose(normalize_rows(b)));
}

Tensor dot(const Tensor& u, const Tensor& v) {
    require_rank(u, 1, "dot");
    require_same_shape(u, v, "dot");
    return sum(mul(u, v));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("reshape");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i];
    });
}

Tensor select(const Tensor& a, std::size_t index) {
    if (a.rank() == 0) throw DimensionError("select: scalar input");
    const std::size_t count = a.dim(0);
    if (index >= count) {
        throw DimensionError("select: index " + std::to_string(index) + " out of range for " +
                             shape_str(a.shape()));
    }
    Shape inner(a.shape().begin() + 1, a.shape().end());
    const std::size_t block = shape_numel(inner);
    auto x = a.values();
    std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(index * block),
                            x.begin() + static_cast<std::ptrdiff_t>((index + 1) * block));
    return make_result("select", std::move(inner), std::move(out), {a}, [index, block](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("select");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < block; ++i) g[index * block + i] += f * o.grad[i];
    });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_rank(a, 2, "slice_rows");
    const std::size_t n = a.dim(1);
    if (begin > end || end > a.dim(0)) {
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    auto x = a.values();
    std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(begin * n),
                            x.begin() + static_cast<std::ptrdiff_t>(end * n));
    return make_result("slice_rows", Shape{end - begin, n}, std::move(out), {a},
                       [begin, n](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = fault("slice_rows");
                           auto& g = p.grad_buffer();
                           for (std::size_t i = 0; i < o.grad.size(); ++i) {
                               g[begin * n + i] += f * o.grad[i];
                           }
                       });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_rank(a, 2, "slice_cols");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (begin > end || end > n) {
        throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    auto x = a.values();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
    return make_result("slice_cols", Shape{m, w}, std::move(out), {a}, [m, n, w, begin](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("slice_cols");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += f * o.grad[i * w + j];
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts[0].dim(1);
    std::size_t rows = 0;
    for (const auto& t : parts) {
        require_rank(t, 2, "concat_rows");
        if (t.dim(1) != n) {
            throw DimensionError("concat_rows: width mismatch " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(t.shape()));
        }
        rows += t.dim(0);
    }
    std::vector<double> out;
    out.reserve(rows * n);
    std::vector<std::size_t> offsets;
    for (const auto& t : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_result("concat_rows", Shape{rows, n}, std::move(out), std::move(parents),
                       [offsets = std::move(offsets)](Node& o) {
                           const double f = fault("concat_rows");
                           for (std::size_t k = 0; k < o.parents.size(); ++k) {
                               if (!wants(o, k)) continue;
                               auto& g = parent(o, k).grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   g[i] += f * o.grad[offsets[k] + i];
                               }
                           }
                       });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t cols = 0;
    std::vector<std::size_t> widths, offsets;
    for (const auto& t : parts) {
        require_rank(t, 2, "concat_cols");
        if (t.dim(0) != m) {
            throw DimensionError("concat_cols: height mismatch " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(t.shape()));
        }
        offsets.push_back(cols);
        widths.push_back(t.dim(1));
        cols += t.dim(1);
    }
    std::vector<double> out(m * cols);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto x = parts[k].values();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out[i * cols + offsets[k] + j] = x[i * widths[k] + j];
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_result("concat_cols", Shape{m, cols}, std::move(out), std::move(parents),
                       [m, cols, widths = std::move(widths), offsets = std::move(offsets)](Node& o) {
                           const double f = fault("concat_cols");
                           for (std::size_t k = 0; k < o.parents.size(); ++k) {
                               if (!wants(o, k)) continue;
                               auto& g = parent(o, k).grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                       g[i * widths[k] + j] += f * o.grad[i * cols + offsets[k] + j];
                           }
                       });
}

Tensor stack(std::span<const Tensor> rows) {
    if (rows.empty()) throw DimensionError("stack: no inputs");
    const std::size_t n = rows[0].numel();
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (const auto& t : rows) {
        require_rank(t, 1, "stack");
        if (t.numel() != n) {
            throw DimensionError("stack: length mismatch " + shape_str(rows[0].shape()) + " vs " +
                                 shape_str(t.shape()));
        }
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    std::vector<Tensor> parents(rows.begin(), rows.end());
    return make_result("stack", Shape{rows.size(), n}, std::move(out), std::move(parents),
                       [n](Node& o) {
                           const double f = fault("stack");
                           for (std::size_t k = 0; k < o.parents.size(); ++k) {
                               if (!wants(o, k)) continue;
                               auto& g = parent(o, k).grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) g[i] += f * o.grad[k * n + i];
                           }
                       });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    require_rank(a, 2, "gather_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<std::size_t> idx(index.begin(), index.end());
    auto x = a.values();
    std::vector<double> out(idx.size() * n);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= m) {
            throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " outside " +
                                 shape_str(a.shape()));
        }
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    Shape shape{idx.size(), n};
    return make_result("gather_rows", std::move(shape), std::move(out), {a},
                       [n, idx = std::move(idx)](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = fault("gather_rows");
                           auto& g = p.grad_buffer();
                           for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += f * o.grad[r * n + j];
                       });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> column_per_row) {
    require_rank(a, 2, "pick");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (column_per_row.size() != m) {
        throw DimensionError("pick: " + std::to_string(column_per_row.size()) +
                             " indices for " + shape_str(a.shape()));
    }
    std::vector<std::size_t> cols(column_per_row.begin(), column_per_row.end());
    auto x = a.values();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (cols[i] >= n) {
            throw DimensionError("pick: column " + std::to_string(cols[i]) + " outside " +
                                 shape_str(a.shape()));
        }
        out[i] = x[i * n + cols[i]];
    }
    return make_result("pick", Shape{m}, std::move(out), {a}, [n, cols = std::move(cols)](Node& o) {
        Node& p = parent(o, 0);
        if (!p.requires_grad) return;
        const double f = fault("pick");
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < cols.size(); ++i) g[i * n + cols[i]] += f * o.grad[i];
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    require_rank(bias, 1, "conv2d");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), ks = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != ks || bias.dim(0) != cout || ks % 2 == 0) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    const std::size_t pad = ks / 2;
    const std::size_t hw = h * w;
    const std::size_t patch = cin * ks * ks;

    // im2col per image: cols[b][r * hw + p], r = (c, ky, kx)
    auto xin = x.values();
    std::vector<double> cols(batch * patch * hw, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        double* cb = cols.data() + b * patch * hw;
        const double* xb = xin.data() + b * cin * hw;
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < ks; ++ky)
                for (std::size_t kx = 0; kx < ks; ++kx) {
                    double* row = cb + ((c * ks + ky) * ks + kx) * hw;
                    for (std::size_t oy = 0; oy < h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ox = 0; ox < w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            row[oy * w + ox] = xb[c * hw + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
                        }
                    }
                }
    }

    auto wv = weight.values();
    auto bv = bias.values();
    std::vector<double> out(batch * cout * hw);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* cb = cols.data() + b * patch * hw;
        for (std::size_t o = 0; o < cout; ++o) {
            double* orow = out.data() + (b * cout + o) * hw;
            std::fill_n(orow, hw, bv[o]);
            for (std::size_t r = 0; r < patch; ++r) {
                const double s = wv[o * patch + r];
                const double* crow = cb + r * hw;
                for (std::size_t p = 0; p < hw; ++p) orow[p] += s * crow[p];
            }
        }
    }

    return make_result(
        "conv2d", Shape{batch, cout, h, w}, std::move(out), {x, weight, bias},
        [batch, cin, cout, h, w, ks, pad, hw, patch, cols = std::move(cols)](Node& o) {
            const double f = fault("conv2d");
            Node& px = parent(o, 0);
            Node& pw = parent(o, 1);
            Node& pb = parent(o, 2);
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t oc = 0; oc < cout; ++oc) {
                        const double* go = o.grad.data() + (b * cout + oc) * hw;
                        double s = 0.0;
                        for (std::size_t p = 0; p < hw; ++p) s += go[p];
                        g[oc] += f * s;
                    }
            }
            if (pw.requires_grad) {
                auto& g = pw.grad_buffer();
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* cb = cols.data() + b * patch * hw;
                    for (std::size_t oc = 0; oc < cout; ++oc) {
                        const double* go = o.grad.data() + (b * cout + oc) * hw;
                        for (std::size_t r = 0; r < patch; ++r) {
                            const double* crow = cb + r * hw;
                            double s = 0.0;
                            for (std::size_t p = 0; p < hw; ++p) s += go[p] * crow[p];
                            g[oc * patch + r] += f * s;
                        }
                    }
                }
            }
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                std::vector<double> dcol(patch * hw);
                for (std::size_t b = 0; b < batch; ++b) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    for (std::size_t oc = 0; oc < cout; ++oc) {
                        const double* go = o.grad.data() + (b * cout + oc) * hw;
                        for (std::size_t r = 0; r < patch; ++r) {
                            const double s = pw.value[oc * patch + r];
                            double* drow = dcol.data() + r * hw;
                            for (std::size_t p = 0; p < hw; ++p) drow[p] += s * go[p];
                        }
                    }
                    double* gb = g.data() + b * cin * hw;
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t ky = 0; ky < ks; ++ky)
                            for (std::size_t kx = 0; kx < ks; ++kx) {
                                const double* row = dcol.data() + ((c * ks + ky) * ks + kx) * hw;
                                for (std::size_t oy = 0; oy < h; ++oy) {
                                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t ox = 0; ox < w; ++ox) {
                                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                        gb[c * hw + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += f * row[oy * w + ox];
                                    }
                                }
                            }
                }
            }
        });
}

Tensor avg_pool2(const Tensor& x) {
    require_rank(x, 4, "avg_pool2");
    const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw DimensionError("avg_pool2: input too small " + shape_str(x.shape()));
    auto in = x.values();
    std::vector<double> out(batch * ch * oh * ow);
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* src = in.data() + bc * h * w;
        double* dst = out.data() + bc * oh * ow;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const std::size_t i0 = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i0] + src[i0 + 1] + src[i0 + w] + src[i0 + w + 1]);
            }
    }
    return make_result("avg_pool2", Shape{batch, ch, oh, ow}, std::move(out), {x},
                       [batch, ch, h, w, oh, ow](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = 0.25 * fault("avg_pool2");
                           auto& g = p.grad_buffer();
                           for (std::size_t bc = 0; bc < batch * ch; ++bc) {
                               double* dst = g.data() + bc * h * w;
                               const double* go = o.grad.data() + bc * oh * ow;
                               for (std::size_t y = 0; y < oh; ++y)
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                       const double v = f * go[y * ow + xx];
                                       const std::size_t i0 = 2 * y * w + 2 * xx;
                                       dst[i0] += v;
                                       dst[i0 + 1] += v;
                                       dst[i0 + w] += v;
                                       dst[i0 + w + 1] += v;
                                   }
                           }
                       });
}

Tensor topk_sum_rows(const Tensor& a, std::size_t k) {
    require_rank(a, 2, "topk_sum_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (k == 0 || k > n) {
        throw ConfigError("topk_sum_rows: k=" + std::to_string(k) + " with " + std::to_string(n) +
                          " candidates per row");
    }
    auto x = a.values();
    std::vector<double> out(m, 0.0);
    std::vector<std::size_t> chosen(m * k);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [row](std::size_t l, std::size_t r) {
                              return row[l] > row[r] || (row[l] == row[r] && l < r);
                          });
        for (std::size_t t = 0; t < k; ++t) {
            chosen[i * k + t] = order[t];
            out[i] += row[order[t]];
        }
    }
    return make_result("topk_sum_rows", Shape{m}, std::move(out), {a},
                       [m, n, k, chosen = std::move(chosen)](Node& o) {
                           Node& p = parent(o, 0);
                           if (!p.requires_grad) return;
                           const double f = fault("topk_sum_rows");
                           auto& g = p.grad_buffer();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t t = 0; t < k; ++t) g[i * n + chosen[i * k + t]] += f * o.grad[i];
                       });
}

} // namespace lpn::ops
