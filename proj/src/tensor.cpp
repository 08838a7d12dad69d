#include "ctr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ctr {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (std::size_t d : shape)
        if (d == 0) throw dimension_error("tensor dimensions must be positive");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(numel(t.shape_), value);
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    for (std::size_t d : shape)
        if (d == 0) throw dimension_error("tensor dimensions must be positive");
    if (numel(shape) != values.size())
        throw dimension_error("shape " + shape_str(shape) + " does not match data length " +
                              std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw dimension_error("axis out of range");
    return shape_[axis];
}

double* Tensor::data() { return data_->data(); }
const double* Tensor::data() const { return data_->data(); }

double Tensor::item() const {
    if (size() != 1) throw contract_error("item() requires a scalar tensor");
    return (*data_)[0];
}

bool Tensor::requires_grad() const { return meta_ && meta_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (on) {
        if (!meta_) meta_ = std::make_shared<GradMeta>();
        meta_->requires_grad = true;
        if (!meta_->grad) meta_->grad = std::make_shared<std::vector<double>>(size(), 0.0);
    } else if (meta_) {
        meta_->requires_grad = false;
    }
}

std::vector<double>& Tensor::grad() {
    if (!requires_grad()) throw contract_error("tensor has no grad slot");
    return *meta_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (!requires_grad()) throw contract_error("tensor has no grad slot");
    return *meta_->grad;
}

void Tensor::zero_grad() {
    if (requires_grad()) std::fill(meta_->grad->begin(), meta_->grad->end(), 0.0);
}

// ---- Tape ----

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    for (auto& m : leaves_) {
        if (m && m->tape == this) {
            m->tape = nullptr;
            m->node_id = -1;
        }
    }
    g_active_tape = prev_;
}

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracks(const Tensor& t) const {
    if (!t.meta_) return false;
    if (t.meta_->tape == this && t.meta_->node_id >= 0) return true;
    return t.meta_->requires_grad;
}

int Tape::track(const Tensor& t) {
    if (!t.meta_) return -1;
    if (t.meta_->tape == this && t.meta_->node_id >= 0) return t.meta_->node_id;
    if (!t.meta_->requires_grad) return -1;
    // requires_grad leaf seen for the first time on this tape
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr, t.size()});
    leaves_.push_back(t.meta_);
    t.meta_->tape = this;
    t.meta_->node_id = id;
    return id;
}

void Tape::record(Tensor& out, std::vector<int> inputs,
                  std::function<void(Tape&, const std::vector<double>&)> backprop) {
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(inputs), std::move(backprop), out.size()});
    leaves_.push_back(nullptr);
    if (!out.meta_) out.meta_ = std::make_shared<GradMeta>();
    out.meta_->tape = this;
    out.meta_->node_id = id;
}

std::vector<double>& Tape::adj(int node_id) {
    auto& a = adj_[static_cast<std::size_t>(node_id)];
    if (a.empty()) a.assign(nodes_[static_cast<std::size_t>(node_id)].out_size, 0.0);
    return a;
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw contract_error("tape already consumed by a previous backward");
    if (loss.size() != 1) throw contract_error("backward requires a scalar loss");
    if (!loss.meta_ || loss.meta_->tape != this || loss.meta_->node_id < 0)
        throw contract_error("loss is not connected to this tape");
    consumed_ = true;
    adj_.assign(nodes_.size(), {});
    adj(loss.meta_->node_id)[0] = 1.0;
    for (std::size_t k = nodes_.size(); k-- > 0;) {
        Node& n = nodes_[k];
        if (!n.backprop) continue;
        auto& g = adj_[k];
        if (g.empty()) continue;
        n.backprop(*this, g);
        g.clear();
        g.shrink_to_fit();
    }
    for (std::size_t k = 0; k < leaves_.size(); ++k) {
        auto& m = leaves_[k];
        if (!m || adj_[k].empty()) continue;
        auto& g = *m->grad;
        const auto& a = adj_[k];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
    }
    adj_.clear();
}

void backward(const Tensor& loss) {
    if (!loss.meta_ || loss.meta_->tape == nullptr)
        throw contract_error("loss is not connected to a tape");
    loss.meta_->tape->backward(loss);
}

// ---- broadcasting helpers ----

Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw dimension_error("shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcast-compatible");
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Row-major strides of `s` aligned to the trailing axes of `out`, with
// stride 0 on broadcast axes.
std::vector<std::size_t> bcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    std::size_t stride = 1;
    std::size_t off = out.size() - s.size();
    for (std::size_t i = s.size(); i-- > 0;) {
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : stride;
        stride *= s[i];
    }
    return st;
}

// Calls fn(out_index, a_index, b_index) for every element of `out`.
template <typename Fn>
void for_each_bcast(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, Fn&& fn) {
    std::size_t n = numel(out);
    std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t lin = 0;;) {
        fn(lin, ia, ib);
        if (++lin == n) break;
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out[ax]) break;
            idx[ax] = 0;
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
        }
    }
}

struct RecordGuard {
    Tape* tape = nullptr;
    bool on = false;
};

RecordGuard recording(std::initializer_list<const Tensor*> ins) {
    Tape* tp = Tape::active();
    if (!tp) return {};
    for (const Tensor* t : ins)
        if (t->defined() && tp->tracks(*t)) return {tp, true};
    return {};
}

} // namespace

// ---- elementwise ----

Tensor ewise(EwiseOp op, const Tensor& a, const Tensor& b) {
    Shape os = broadcast_shape(a.shape(), b.shape());
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    Tensor out = Tensor::zeros(os);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    bool same = a.shape() == b.shape();
    if (same) {
        std::size_t n = out.size();
        switch (op) {
            case EwiseOp::add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
            case EwiseOp::sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
            case EwiseOp::mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
            case EwiseOp::div: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
        }
    } else {
        for_each_bcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (op) {
                case EwiseOp::add: po[o] = pa[ia] + pb[ib]; break;
                case EwiseOp::sub: po[o] = pa[ia] - pb[ib]; break;
                case EwiseOp::mul: po[o] = pa[ia] * pb[ib]; break;
                case EwiseOp::div: po[o] = pa[ia] / pb[ib]; break;
            }
        });
    }
    if (auto rec = recording({&a, &b}); rec.on) {
        Tape* tp = rec.tape;
        int ia = tp->track(a), ib = tp->track(b);
        auto adata = a.data_;
        auto bdata = b.data_;
        Shape ash = a.shape(), bsh = b.shape();
        tp->record(out, {ia, ib}, [=](Tape& t, const std::vector<double>& g) {
            auto accum = [&](int id, const Shape& sh, auto&& contrib) {
                if (id < 0) return;
                auto& acc = t.adj(id);
                auto st_self = bcast_strides(sh, os);
                for_each_bcast(os, st_self, st_self, [&](std::size_t o, std::size_t is, std::size_t) {
                    acc[is] += contrib(o);
                });
            };
            const double* va = adata->data();
            const double* vb = bdata->data();
            auto sta = bcast_strides(ash, os);
            auto stb = bcast_strides(bsh, os);
            switch (op) {
                case EwiseOp::add:
                    accum(ia, ash, [&](std::size_t o) { return g[o]; });
                    accum(ib, bsh, [&](std::size_t o) { return g[o]; });
                    break;
                case EwiseOp::sub:
                    accum(ia, ash, [&](std::size_t o) { return g[o]; });
                    accum(ib, bsh, [&](std::size_t o) { return -g[o]; });
                    break;
                case EwiseOp::mul:
                    if (ia >= 0) {
                        auto& acc = t.adj(ia);
                        for_each_bcast(os, sta, stb, [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc[i] += g[o] * vb[j];
                        });
                    }
                    if (ib >= 0) {
                        auto& acc = t.adj(ib);
                        for_each_bcast(os, sta, stb, [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc[j] += g[o] * va[i];
                        });
                    }
                    break;
                case EwiseOp::div:
                    if (ia >= 0) {
                        auto& acc = t.adj(ia);
                        for_each_bcast(os, sta, stb, [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc[i] += g[o] / vb[j];
                        });
                    }
                    if (ib >= 0) {
                        auto& acc = t.adj(ib);
                        for_each_bcast(os, sta, stb, [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc[j] -= g[o] * va[i] / (vb[j] * vb[j]);
                        });
                    }
                    break;
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return ewise(EwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return ewise(EwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return ewise(EwiseOp::mul, a, b); }
Tensor divide(const Tensor& a, const Tensor& b) { return ewise(EwiseOp::div, a, b); }

Tensor scale(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

// ---- matmul family ----

namespace {

// y[m,n] += a[m,k] * b[k,n], row-major, ikj order
void mm_accum(const double* a, const double* b, double* y,
              std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* yi = y + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) yi[j] += av * bp[j];
        }
    }
}

// y[m,k] += g[m,n] * b[k,n]^T
void mm_accum_bt(const double* g, const double* b, double* y,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        double* yi = y + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
            yi[p] += s;
        }
    }
}

// y[k,n] += a[m,k]^T * g[m,n]
void mm_accum_at(const double* a, const double* g, double* y,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* yp = y + p * n;
            for (std::size_t j = 0; j < n; ++j) yp[j] += av * gi[j];
        }
    }
}

} // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() < 1 || weight.rank() != 2)
        throw dimension_error("linear expects x[...,C] and weight[C,C']");
    std::size_t cin = x.shape().back();
    if (weight.shape()[0] != cin)
        throw dimension_error("linear: x last dim " + std::to_string(cin) +
                              " != weight rows " + std::to_string(weight.shape()[0]));
    std::size_t cout = weight.shape()[1];
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != cout))
        throw dimension_error("linear: bias shape mismatch");
    std::size_t rows = x.size() / cin;
    Shape os = x.shape();
    os.back() = cout;
    Tensor out = Tensor::zeros(os);
    if (bias.defined()) {
        double* po = out.data();
        const double* pb = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(pb, pb + cout, po + r * cout);
    }
    mm_accum(x.data(), weight.data(), out.data(), rows, cin, cout);

    if (auto rec = recording({&x, &weight, &bias}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x), iw = tp->track(weight);
        int ib = bias.defined() ? tp->track(bias) : -1;
        auto xdata = x.data_;
        auto wdata = weight.data_;
        tp->record(out, {ix, iw, ib}, [=](Tape& t, const std::vector<double>& g) {
            if (ix >= 0) mm_accum_bt(g.data(), wdata->data(), t.adj(ix).data(), rows, cin, cout);
            if (iw >= 0) mm_accum_at(xdata->data(), g.data(), t.adj(iw).data(), rows, cin, cout);
            if (ib >= 0) {
                auto& gb = t.adj(ib);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw dimension_error("matmul expects rank-2 tensors");
    if (a.shape()[1] != b.shape()[0])
        throw dimension_error("matmul: inner dimensions " + std::to_string(a.shape()[1]) +
                              " and " + std::to_string(b.shape()[0]) + " disagree");
    return linear(a, b);
}

Tensor batch_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3)
        throw dimension_error("batch_matmul expects rank-3 tensors");
    if (a.shape()[0] != b.shape()[0])
        throw dimension_error("batch_matmul: batch dimensions disagree");
    if (a.shape()[2] != b.shape()[1])
        throw dimension_error("batch_matmul: inner dimensions disagree");
    std::size_t bn = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    Tensor out = Tensor::zeros({bn, m, n});
    for (std::size_t s = 0; s < bn; ++s)
        mm_accum(a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n, m, k, n);

    if (auto rec = recording({&a, &b}); rec.on) {
        Tape* tp = rec.tape;
        int ia = tp->track(a), ib = tp->track(b);
        auto adata = a.data_;
        auto bdata = b.data_;
        tp->record(out, {ia, ib}, [=](Tape& t, const std::vector<double>& g) {
            for (std::size_t s = 0; s < bn; ++s) {
                const double* gs = g.data() + s * m * n;
                if (ia >= 0)
                    mm_accum_bt(gs, bdata->data() + s * k * n, t.adj(ia).data() + s * m * k, m, k, n);
                if (ib >= 0)
                    mm_accum_at(adata->data() + s * m * k, gs, t.adj(ib).data() + s * k * n, m, k, n);
            }
        });
    }
    return out;
}

// ---- activations ----

Tensor activation(Activation kind, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    std::size_t n = x.size();
    if (kind == Activation::softmax_lastdim) {
        std::size_t c = x.shape().back();
        std::size_t rows = n / c;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = px + r * c;
            double* orow = po + r * c;
            double mx = xr[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += (orow[j] = std::exp(xr[j] - mx));
            for (std::size_t j = 0; j < c; ++j) orow[j] /= s;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            double v = px[i];
            switch (kind) {
                case Activation::tanh: po[i] = std::tanh(v); break;
                case Activation::sigmoid:
                    po[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                   : std::exp(v) / (1.0 + std::exp(v));
                    break;
                case Activation::relu: po[i] = v > 0 ? v : 0.0; break;
                default: break;
            }
        }
    }
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        auto ydata = out.data_;
        auto xdata = x.data_;
        Shape xs = x.shape();
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            const double* y = ydata->data();
            const double* xv = xdata->data();
            if (kind == Activation::softmax_lastdim) {
                std::size_t c = xs.back();
                std::size_t rows = numel(xs) / c;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y + r * c;
                    const double* gr = g.data() + r * c;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                    for (std::size_t j = 0; j < c; ++j)
                        gx[r * c + j] += yr[j] * (gr[j] - dot);
                }
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    switch (kind) {
                        case Activation::tanh: gx[i] += g[i] * (1.0 - y[i] * y[i]); break;
                        case Activation::sigmoid: gx[i] += g[i] * y[i] * (1.0 - y[i]); break;
                        case Activation::relu: gx[i] += xv[i] > 0 ? g[i] : 0.0; break;
                        default: break;
                    }
                }
            }
        });
    }
    return out;
}

// ---- reductions ----

Tensor reduce(Reduce kind, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw dimension_error("reduce: axis out of range");
    const Shape& xs = x.shape();
    Shape os;
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (i != axis) os.push_back(xs[i]);
    if (os.empty()) os.push_back(1);
    std::size_t outer = 1, inner = 1, nax = xs[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
    for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
    Tensor out = Tensor::zeros(os);
    const double* px = x.data();
    double* po = out.data();
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (kind == Reduce::max) argmax->assign(outer * inner, 0);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const double* base = px + o * nax * inner + i;
            double acc;
            if (kind == Reduce::max) {
                acc = base[0];
                std::size_t best = 0;
                for (std::size_t a = 1; a < nax; ++a)
                    if (base[a * inner] > acc) { acc = base[a * inner]; best = a; }
                (*argmax)[o * inner + i] = best;
            } else {
                acc = 0.0;
                for (std::size_t a = 0; a < nax; ++a) acc += base[a * inner];
                if (kind == Reduce::mean) acc /= static_cast<double>(nax);
            }
            po[o * inner + i] = acc;
        }
    }
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    double gv = g[o * inner + i];
                    double* base = gx.data() + o * nax * inner + i;
                    switch (kind) {
                        case Reduce::sum:
                            for (std::size_t a = 0; a < nax; ++a) base[a * inner] += gv;
                            break;
                        case Reduce::mean:
                            gv /= static_cast<double>(nax);
                            for (std::size_t a = 0; a < nax; ++a) base[a * inner] += gv;
                            break;
                        case Reduce::max:
                            base[(*argmax)[o * inner + i] * inner] += gv;
                            break;
                    }
                }
            }
        });
    }
    return out;
}

// ---- structure ops ----

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw dimension_error("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw dimension_error("concat: axis out of range");
    Shape os = s0;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != s0.size()) throw dimension_error("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i])
                throw dimension_error("concat: shapes differ off the concat axis");
        total += p.shape()[axis];
    }
    os[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Tensor out = Tensor::zeros(os);
    double* po = out.data();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        std::size_t nax = p.shape()[axis];
        const double* pp = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pp + o * nax * inner, pp + (o + 1) * nax * inner,
                      po + (o * total + offset) * inner);
        offset += nax;
    }
    Tape* tp = Tape::active();
    bool on = false;
    if (tp)
        for (const Tensor& p : parts)
            if (tp->tracks(p)) { on = true; break; }
    if (on) {
        std::vector<int> ids;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            ids.push_back(tp->track(p));
            widths.push_back(p.shape()[axis]);
        }
        tp->record(out, ids, [=](Tape& t, const std::vector<double>& g) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                std::size_t nax = widths[k];
                if (ids[k] >= 0) {
                    auto& gp = t.adj(ids[k]);
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < nax * inner; ++i)
                            gp[o * nax * inner + i] += g[(o * total + off) * inner + i];
                }
                off += nax;
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw dimension_error("reshape: element count mismatch");
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = std::make_shared<std::vector<double>>(*x.data_);
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    std::size_t r = x.rank();
    if (axes.size() != r) throw dimension_error("permute: axes length mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t a : axes) {
        if (a >= r || seen[a]) throw dimension_error("permute: invalid axes");
        seen[a] = true;
    }
    Shape os(r);
    for (std::size_t i = 0; i < r; ++i) os[i] = x.shape()[axes[i]];
    std::vector<std::size_t> xstr(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) xstr[i] = xstr[i + 1] * x.shape()[i + 1];
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) src_stride[i] = xstr[axes[i]];
    Tensor out = Tensor::zeros(os);
    const double* px = x.data();
    double* po = out.data();
    std::vector<std::size_t> idx(r, 0);
    std::size_t isrc = 0, n = out.size();
    for (std::size_t lin = 0;;) {
        po[lin] = px[isrc];
        if (++lin == n) break;
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            isrc += src_stride[ax];
            if (idx[ax] < os[ax]) break;
            idx[ax] = 0;
            isrc -= src_stride[ax] * os[ax];
        }
    }
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            std::vector<std::size_t> id2(r, 0);
            std::size_t is = 0;
            for (std::size_t lin = 0;;) {
                gx[is] += g[lin];
                if (++lin == g.size()) break;
                for (std::size_t ax = r; ax-- > 0;) {
                    ++id2[ax];
                    is += src_stride[ax];
                    if (id2[ax] < os[ax]) break;
                    id2[ax] = 0;
                    is -= src_stride[ax] * os[ax];
                }
            }
        });
    }
    return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    Shape check = broadcast_shape(x.shape(), shape);
    if (check != shape)
        throw dimension_error("broadcast_to: " + shape_str(x.shape()) +
                              " cannot broadcast to " + shape_str(shape));
    auto sx = bcast_strides(x.shape(), shape);
    Tensor out = Tensor::zeros(shape);
    const double* px = x.data();
    double* po = out.data();
    for_each_bcast(shape, sx, sx, [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            for_each_bcast(shape, sx, sx, [&](std::size_t o, std::size_t i, std::size_t) {
                gx[i] += g[o];
            });
        });
    }
    return out;
}

Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw dimension_error("slice: axis out of range");
    if (start + len > x.shape()[axis]) throw dimension_error("slice: range out of bounds");
    const Shape& xs = x.shape();
    Shape os = xs;
    os[axis] = len;
    std::size_t outer = 1, inner = 1, nax = xs[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
    for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
    Tensor out = Tensor::zeros(os);
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(px + (o * nax + start) * inner, px + (o * nax + start + len) * inner,
                  po + o * len * inner);
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < len * inner; ++i)
                    gx[(o * nax + start) * inner + i] += g[o * len * inner + i];
        });
    }
    return out;
}

Tensor sqrt_elem(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = std::sqrt(px[i]);
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        auto ydata = out.data_;
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            const double* y = ydata->data();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / y[i];
        });
    }
    return out;
}

// ---- graph aggregation ----

Tensor topo_aggregate(const Tensor& x, const Tensor& topo) {
    if (x.rank() != 4) throw dimension_error("topo_aggregate expects x[B,T,N,C]");
    std::size_t B = x.shape()[0], T = x.shape()[1], N = x.shape()[2], C = x.shape()[3];
    std::size_t tr = topo.rank();
    if (tr == 2) {
        if (topo.shape()[0] != N || topo.shape()[1] != N)
            throw dimension_error("topo_aggregate: topology must be N x N");
    } else if (tr == 3) {
        if (topo.shape()[0] != B || topo.shape()[1] != N || topo.shape()[2] != N)
            throw dimension_error("topo_aggregate: topology must be B x N x N");
    } else if (tr == 4) {
        if (topo.shape()[0] != B || topo.shape()[1] != N || topo.shape()[2] != N ||
            topo.shape()[3] != C)
            throw dimension_error("topo_aggregate: topology must be B x N x N x C");
    } else {
        throw dimension_error("topo_aggregate: topology rank must be 2, 3 or 4");
    }
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pa = topo.data();
    double* po = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            const double* xbt = px + (b * T + t) * N * C;
            double* obt = po + (b * T + t) * N * C;
            for (std::size_t i = 0; i < N; ++i) {
                double* oi = obt + i * C;
                for (std::size_t j = 0; j < N; ++j) {
                    const double* xj = xbt + j * C;
                    if (tr == 2) {
                        double a = pa[i * N + j];
                        if (a == 0.0) continue;
                        for (std::size_t c = 0; c < C; ++c) oi[c] += a * xj[c];
                    } else if (tr == 3) {
                        double a = pa[(b * N + i) * N + j];
                        for (std::size_t c = 0; c < C; ++c) oi[c] += a * xj[c];
                    } else {
                        const double* rc = pa + ((b * N + i) * N + j) * C;
                        for (std::size_t c = 0; c < C; ++c) oi[c] += rc[c] * xj[c];
                    }
                }
            }
        }
    }
    if (auto rec = recording({&x, &topo}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x), ia = tp->track(topo);
        auto xdata = x.data_;
        auto adata = topo.data_;
        tp->record(out, {ix, ia}, [=](Tape& t, const std::vector<double>& g) {
            const double* xv = xdata->data();
            const double* av = adata->data();
            std::vector<double>* gx = ix >= 0 ? &t.adj(ix) : nullptr;
            std::vector<double>* ga = ia >= 0 ? &t.adj(ia) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t tt = 0; tt < T; ++tt) {
                    const double* gbt = g.data() + (b * T + tt) * N * C;
                    const double* xbt = xv + (b * T + tt) * N * C;
                    for (std::size_t i = 0; i < N; ++i) {
                        const double* gi = gbt + i * C;
                        for (std::size_t j = 0; j < N; ++j) {
                            const double* xj = xbt + j * C;
                            if (tr == 2) {
                                double a = av[i * N + j];
                                if (gx) {
                                    double* gxj = gx->data() + (b * T + tt) * N * C + j * C;
                                    for (std::size_t c = 0; c < C; ++c) gxj[c] += a * gi[c];
                                }
                                if (ga) {
                                    double s = 0.0;
                                    for (std::size_t c = 0; c < C; ++c) s += gi[c] * xj[c];
                                    (*ga)[i * N + j] += s;
                                }
                            } else if (tr == 3) {
                                double a = av[(b * N + i) * N + j];
                                if (gx) {
                                    double* gxj = gx->data() + (b * T + tt) * N * C + j * C;
                                    for (std::size_t c = 0; c < C; ++c) gxj[c] += a * gi[c];
                                }
                                if (ga) {
                                    double s = 0.0;
                                    for (std::size_t c = 0; c < C; ++c) s += gi[c] * xj[c];
                                    (*ga)[(b * N + i) * N + j] += s;
                                }
                            } else {
                                const double* rc = av + ((b * N + i) * N + j) * C;
                                if (gx) {
                                    double* gxj = gx->data() + (b * T + tt) * N * C + j * C;
                                    for (std::size_t c = 0; c < C; ++c) gxj[c] += rc[c] * gi[c];
                                }
                                if (ga) {
                                    double* gac = ga->data() + ((b * N + i) * N + j) * C;
                                    for (std::size_t c = 0; c < C; ++c) gac[c] += gi[c] * xj[c];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- temporal ops ----

Tensor temporal_conv(const Tensor& x, const Tensor& w, const Tensor& bias,
                     std::size_t stride, std::size_t dilation) {
    if (x.rank() != 4 || w.rank() != 3)
        throw dimension_error("temporal_conv expects x[B,T,N,Cin], w[Cout,Cin,K]");
    std::size_t B = x.shape()[0], T = x.shape()[1], N = x.shape()[2], Ci = x.shape()[3];
    std::size_t Co = w.shape()[0], K = w.shape()[2];
    if (w.shape()[1] != Ci) throw dimension_error("temporal_conv: channel mismatch");
    if (stride == 0 || dilation == 0) throw configuration_error("temporal_conv: zero stride/dilation");
    long pad = static_cast<long>(dilation * (K - 1) / 2);
    std::size_t To = (T - 1) / stride + 1;
    Tensor out = Tensor::zeros({B, To, N, Co});
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    if (bias.defined()) {
        const double* pb = bias.data();
        std::size_t sites = B * To * N;
        for (std::size_t s = 0; s < sites; ++s)
            std::copy(pb, pb + Co, po + s * Co);
    }
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t to = 0; to < To; ++to) {
            for (std::size_t k = 0; k < K; ++k) {
                long ti = static_cast<long>(to * stride) + static_cast<long>(k * dilation) - pad;
                if (ti < 0 || ti >= static_cast<long>(T)) continue;
                const double* xslab = px + (b * T + static_cast<std::size_t>(ti)) * N * Ci;
                double* oslab = po + (b * To + to) * N * Co;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* xn = xslab + n * Ci;
                    double* on = oslab + n * Co;
                    for (std::size_t co = 0; co < Co; ++co) {
                        const double* wk = pw + (co * Ci) * K + k;
                        double s = 0.0;
                        for (std::size_t ci = 0; ci < Ci; ++ci) s += wk[ci * K] * xn[ci];
                        on[co] += s;
                    }
                }
            }
        }
    }
    if (auto rec = recording({&x, &w, &bias}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x), iw = tp->track(w);
        int ib = bias.defined() ? tp->track(bias) : -1;
        auto xdata = x.data_;
        auto wdata = w.data_;
        tp->record(out, {ix, iw, ib}, [=](Tape& t, const std::vector<double>& g) {
            const double* xv = xdata->data();
            const double* wv = wdata->data();
            std::vector<double>* gx = ix >= 0 ? &t.adj(ix) : nullptr;
            std::vector<double>* gw = iw >= 0 ? &t.adj(iw) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t to = 0; to < To; ++to) {
                    for (std::size_t k = 0; k < K; ++k) {
                        long ti = static_cast<long>(to * stride) + static_cast<long>(k * dilation) - pad;
                        if (ti < 0 || ti >= static_cast<long>(T)) continue;
                        const double* xslab = xv + (b * T + static_cast<std::size_t>(ti)) * N * Ci;
                        const double* gslab = g.data() + (b * To + to) * N * Co;
                        for (std::size_t n = 0; n < N; ++n) {
                            const double* xn = xslab + n * Ci;
                            const double* gn = gslab + n * Co;
                            for (std::size_t co = 0; co < Co; ++co) {
                                double gv = gn[co];
                                if (gv == 0.0) continue;
                                if (gw) {
                                    double* wk = gw->data() + (co * Ci) * K + k;
                                    for (std::size_t ci = 0; ci < Ci; ++ci) wk[ci * K] += gv * xn[ci];
                                }
                                if (gx) {
                                    const double* wk = wv + (co * Ci) * K + k;
                                    double* gxn = gx->data() +
                                                  (b * T + static_cast<std::size_t>(ti)) * N * Ci + n * Ci;
                                    for (std::size_t ci = 0; ci < Ci; ++ci) gxn[ci] += gv * wk[ci * K];
                                }
                            }
                        }
                    }
                }
            }
            if (ib >= 0) {
                auto& gb = t.adj(ib);
                std::size_t sites = B * To * N;
                for (std::size_t s = 0; s < sites; ++s)
                    for (std::size_t co = 0; co < Co; ++co) gb[co] += g[s * Co + co];
            }
        });
    }
    return out;
}

Tensor temporal_maxpool(const Tensor& x, std::size_t kernel, std::size_t stride) {
    if (x.rank() != 4) throw dimension_error("temporal_maxpool expects x[B,T,N,C]");
    std::size_t B = x.shape()[0], T = x.shape()[1], N = x.shape()[2], C = x.shape()[3];
    long pad = static_cast<long>((kernel - 1) / 2);
    std::size_t To = (T - 1) / stride + 1;
    Tensor out = Tensor::zeros({B, To, N, C});
    const double* px = x.data();
    double* po = out.data();
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size(), 0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t to = 0; to < To; ++to) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t bt = 0;
                    for (std::size_t k = 0; k < kernel; ++k) {
                        long ti = static_cast<long>(to * stride) + static_cast<long>(k) - pad;
                        if (ti < 0 || ti >= static_cast<long>(T)) continue;
                        double v = px[((b * T + static_cast<std::size_t>(ti)) * N + n) * C + c];
                        if (v > best) { best = v; bt = static_cast<std::size_t>(ti); }
                    }
                    std::size_t oi = ((b * To + to) * N + n) * C + c;
                    po[oi] = best;
                    (*argmax)[oi] = (b * T + bt) * N * C + n * C + c;
                }
            }
        }
    }
    if (auto rec = recording({&x}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(x);
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
        });
    }
    return out;
}

// ---- loss ----

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw dimension_error("cross_entropy expects logits[B,K]");
    std::size_t B = logits.shape()[0], K = logits.shape()[1];
    if (labels.size() != B) throw contract_error("cross_entropy: label count mismatch");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= K)
            throw contract_error("cross_entropy: label out of range");
    const double* pl = logits.data();
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = pl + b * K;
        double* pr = probs->data() + b * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < K; ++j) s += (pr[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < K; ++j) pr[j] /= s;
        loss -= std::log(pr[static_cast<std::size_t>(labels[b])]);
    }
    loss /= static_cast<double>(B);
    Tensor out = Tensor::scalar(loss);
    if (auto rec = recording({&logits}); rec.on) {
        Tape* tp = rec.tape;
        int ix = tp->track(logits);
        auto labs = labels;
        tp->record(out, {ix}, [=](Tape& t, const std::vector<double>& g) {
            if (ix < 0) return;
            auto& gx = t.adj(ix);
            double gv = g[0] / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t j = 0; j < K; ++j) {
                    double p = (*probs)[b * K + j];
                    gx[b * K + j] += gv * (p - (static_cast<std::size_t>(labs[b]) == j ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

} // namespace ctr
