#include "sand/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sand::net {

namespace kernels {

void matvec(const double* w, const double* x, double* y, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const double* wr = w + static_cast<std::size_t>(i) * cols;
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) {
            acc += wr[j] * x[j];
        }
        y[i] = acc;
    }
}

void softmax(const double* x, double* y, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
    }
    for (int i = 0; i < n; ++i) {
        y[i] /= sum;
    }
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void activation(Act act, const double* x, double* y, int n) {
    switch (act) {
        case Act::kIdentity:
            std::copy(x, x + n, y);
            break;
        case Act::kTanh:
            for (int i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
            break;
        case Act::kSoftplus:
            for (int i = 0; i < n; ++i) y[i] = softplus(x[i]);
            break;
        case Act::kSigmoid:
            for (int i = 0; i < n; ++i) y[i] = sigmoid(x[i]);
            break;
    }
}

double activation_derivative(Act act, double x, double y) {
    switch (act) {
        case Act::kIdentity: return 1.0;
        case Act::kTanh: return 1.0 - y * y;
        case Act::kSoftplus: return sigmoid(x);
        case Act::kSigmoid: return y * (1.0 - y);
    }
    return 1.0;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::create(const std::string& name, std::vector<std::size_t> shape) {
    if (entries_.count(name) != 0) {
        throw ContractError("duplicate parameter name: " + name);
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    Entry& e = entries_[name];
    e.value.shape = shape;
    e.value.data.assign(n, 0.0);
    e.grad.shape = std::move(shape);
    e.grad.data.assign(n, 0.0);
    return e.value;
}

bool ParamStore::has(const std::string& name) const { return entries_.count(name) != 0; }

Tensor& ParamStore::value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter: " + name);
    }
    return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter: " + name);
    }
    return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter: " + name);
    }
    return it->second.grad;
}

const Tensor& ParamStore::grad(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw ContractError("unknown parameter: " + name);
    }
    return it->second.grad;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, entry] : entries_) {
        out.push_back(name);
    }
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : entries_) {
        if (name.rfind(prefix, 0) == 0) {
            out.push_back(name);
        }
    }
    return out;
}

void ParamStore::zero_grads() {
    for (auto& [name, entry] : entries_) {
        std::fill(entry.grad.data.begin(), entry.grad.data.end(), 0.0);
    }
}

double ParamStore::grad_norm(const std::vector<std::string>& names) const {
    double sq = 0.0;
    for (const auto& name : names) {
        for (double g : grad(name).data) {
            sq += g * g;
        }
    }
    return std::sqrt(sq);
}

void ParamStore::scale_grads(const std::vector<std::string>& names, double factor) {
    for (const auto& name : names) {
        for (double& g : grad(name).data) {
            g *= factor;
        }
    }
}

void ParamStore::clip_grad_norm(const std::vector<std::string>& names, double max_norm) {
    const double norm = grad_norm(names);
    if (norm > max_norm && norm > 0.0) {
        scale_grads(names, max_norm / norm);
    }
}

// ---------------------------------------------------------------------------
// MlpSpec

void MlpSpec::validate() const {
    if (widths.size() < 2) {
        throw ContractError("MlpSpec needs at least one layer");
    }
    for (int w : widths) {
        if (w < 1) {
            throw ContractError("MlpSpec widths must be positive");
        }
    }
    if (acts.size() != widths.size() - 1) {
        throw ContractError("MlpSpec needs one activation per layer");
    }
}

MlpSpec make_mlp_spec(std::vector<int> widths, Act hidden_act, Act out_act) {
    MlpSpec spec;
    spec.widths = std::move(widths);
    if (spec.widths.size() < 2) {
        throw ContractError("MlpSpec needs at least one layer");
    }
    spec.acts.assign(spec.widths.size() - 1, hidden_act);
    spec.acts.back() = out_act;
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::clear() {
    nodes_.clear();
    values_.clear();
    grads_.clear();
    param_cache_.clear();
    bound_grads_.clear();
    consumed_ = false;
}

void Tape::check_var(Var v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size()) {
        throw ContractError("invalid tape variable");
    }
}

Tape::Var Tape::push(Op op, int len, int a, int b) {
    Node node;
    node.op = op;
    node.a = a;
    node.b = b;
    node.off = values_.size();
    node.len = len;
    values_.resize(values_.size() + static_cast<std::size_t>(len));
    nodes_.push_back(node);
    return static_cast<Var>(nodes_.size() - 1);
}

Tape::Var Tape::param(const std::string& name) {
    if (store_ == nullptr) {
        throw ContractError("tape has no parameter store bound");
    }
    auto it = param_cache_.find(name);
    if (it != param_cache_.end()) {
        return it->second;
    }
    Tensor& value = store_->value(name);
    Tensor& grad = store_->grad(name);
    Var v = push(Op::kParam, static_cast<int>(value.size()));
    std::copy(value.data.begin(), value.data.end(), data(v));
    nodes_[static_cast<std::size_t>(v)].param = static_cast<int>(bound_grads_.size());
    bound_grads_.push_back(&grad);
    param_cache_.emplace(name, v);
    return v;
}

Tape::Var Tape::input(std::span<const double> v) {
    Var out = push(Op::kInput, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), data(out));
    return out;
}

Tape::Var Tape::constant(double v) {
    Var out = push(Op::kInput, 1);
    data(out)[0] = v;
    return out;
}

Tape::Var Tape::matvec(Var w, Var x, int rows, int cols) {
    check_var(w);
    check_var(x);
    if (length(w) != rows * cols || length(x) != cols) {
        throw ContractError("matvec shape mismatch");
    }
    Var y = push(Op::kMatVec, rows, w, x);
    nodes_[static_cast<std::size_t>(y)].i0 = rows;
    nodes_[static_cast<std::size_t>(y)].i1 = cols;
    kernels::matvec(data(w), data(x), data(y), rows, cols);
    return y;
}

Tape::Var Tape::add(Var a, Var b) {
    check_var(a);
    check_var(b);
    if (length(a) != length(b)) {
        throw ContractError("add length mismatch");
    }
    Var y = push(Op::kAdd, length(a), a, b);
    const double* pa = data(a);
    const double* pb = data(b);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = pa[i] + pb[i];
    return y;
}

Tape::Var Tape::sub(Var a, Var b) {
    check_var(a);
    check_var(b);
    if (length(a) != length(b)) {
        throw ContractError("sub length mismatch");
    }
    Var y = push(Op::kSub, length(a), a, b);
    const double* pa = data(a);
    const double* pb = data(b);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = pa[i] - pb[i];
    return y;
}

Tape::Var Tape::mul(Var a, Var b) {
    check_var(a);
    check_var(b);
    if (length(a) != length(b)) {
        throw ContractError("mul length mismatch");
    }
    Var y = push(Op::kMul, length(a), a, b);
    const double* pa = data(a);
    const double* pb = data(b);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = pa[i] * pb[i];
    return y;
}

Tape::Var Tape::scale(Var a, double s) {
    check_var(a);
    Var y = push(Op::kScale, length(a), a);
    nodes_[static_cast<std::size_t>(y)].d0 = s;
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = pa[i] * s;
    return y;
}

Tape::Var Tape::scale_by(Var a, Var scalar) {
    check_var(a);
    check_var(scalar);
    if (length(scalar) != 1) {
        throw ContractError("scale_by needs a scalar second argument");
    }
    Var y = push(Op::kScaleBy, length(a), a, scalar);
    const double s = data(scalar)[0];
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = pa[i] * s;
    return y;
}

Tape::Var Tape::activation(Var a, Act act) {
    switch (act) {
        case Act::kIdentity: return a;
        case Act::kTanh: {
            Var y = push(Op::kTanh, length(a), a);
            kernels::activation(act, data(a), data(y), length(a));
            return y;
        }
        case Act::kSoftplus: {
            Var y = push(Op::kSoftplus, length(a), a);
            kernels::activation(act, data(a), data(y), length(a));
            return y;
        }
        case Act::kSigmoid: {
            Var y = push(Op::kSigmoid, length(a), a);
            kernels::activation(act, data(a), data(y), length(a));
            return y;
        }
    }
    throw ContractError("unknown activation");
}

Tape::Var Tape::exp_of(Var a) {
    check_var(a);
    Var y = push(Op::kExp, length(a), a);
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = std::exp(pa[i]);
    return y;
}

Tape::Var Tape::log_of(Var a) {
    check_var(a);
    Var y = push(Op::kLog, length(a), a);
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = std::log(pa[i]);
    return y;
}

Tape::Var Tape::neg(Var a) {
    check_var(a);
    Var y = push(Op::kNeg, length(a), a);
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = -pa[i];
    return y;
}

Tape::Var Tape::concat(Var a, Var b) {
    check_var(a);
    check_var(b);
    Var y = push(Op::kConcat, length(a) + length(b), a, b);
    double* py = data(y);
    std::copy(data(a), data(a) + length(a), py);
    std::copy(data(b), data(b) + length(b), py + length(a));
    return y;
}

Tape::Var Tape::sum(Var a) {
    check_var(a);
    Var y = push(Op::kSum, 1, a);
    const double* pa = data(a);
    double acc = 0.0;
    for (int i = 0; i < length(a); ++i) acc += pa[i];
    data(y)[0] = acc;
    return y;
}

Tape::Var Tape::dot(Var a, Var b) {
    check_var(a);
    check_var(b);
    if (length(a) != length(b)) {
        throw ContractError("dot length mismatch");
    }
    Var y = push(Op::kDot, 1, a, b);
    const double* pa = data(a);
    const double* pb = data(b);
    double acc = 0.0;
    for (int i = 0; i < length(a); ++i) acc += pa[i] * pb[i];
    data(y)[0] = acc;
    return y;
}

Tape::Var Tape::softmax(Var a) {
    check_var(a);
    Var y = push(Op::kSoftmax, length(a), a);
    kernels::softmax(data(a), data(y), length(a));
    return y;
}

Tape::Var Tape::row(Var table, int row_index, int row_len) {
    check_var(table);
    if (row_len < 1 || (row_index + 1) * row_len > length(table) || row_index < 0) {
        throw ContractError("row lookup out of range");
    }
    Var y = push(Op::kRow, row_len, table);
    nodes_[static_cast<std::size_t>(y)].i0 = row_index;
    nodes_[static_cast<std::size_t>(y)].i1 = row_len;
    const double* src = data(table) + static_cast<std::size_t>(row_index) * row_len;
    std::copy(src, src + row_len, data(y));
    return y;
}

Tape::Var Tape::pick(Var a, int index) {
    check_var(a);
    if (index < 0 || index >= length(a)) {
        throw ContractError("pick index out of range");
    }
    Var y = push(Op::kPick, 1, a);
    nodes_[static_cast<std::size_t>(y)].i0 = index;
    data(y)[0] = data(a)[index];
    return y;
}

Tape::Var Tape::clamp(Var a, double lo, double hi) {
    check_var(a);
    Var y = push(Op::kClamp, length(a), a);
    nodes_[static_cast<std::size_t>(y)].d0 = lo;
    nodes_[static_cast<std::size_t>(y)].d1 = hi;
    const double* pa = data(a);
    double* py = data(y);
    for (int i = 0; i < length(a); ++i) py[i] = std::min(std::max(pa[i], lo), hi);
    return y;
}

std::span<const double> Tape::value(Var v) const {
    check_var(v);
    const Node& n = nodes_[static_cast<std::size_t>(v)];
    return {values_.data() + n.off, static_cast<std::size_t>(n.len)};
}

double Tape::scalar(Var v) const {
    check_var(v);
    if (length(v) != 1) {
        throw ContractError("scalar() on non-scalar variable");
    }
    return data(v)[0];
}

int Tape::length(Var v) const {
    check_var(v);
    return nodes_[static_cast<std::size_t>(v)].len;
}

void Tape::backward(Var loss, double seed) {
    check_var(loss);
    if (consumed_) {
        throw ContractError("tape record already consumed by backward()");
    }
    consumed_ = true;
    if (length(loss) != 1) {
        throw ContractError("backward() requires a scalar loss");
    }
    grads_.assign(values_.size(), 0.0);
    grads_[nodes_[static_cast<std::size_t>(loss)].off] = seed;

    for (int idx = loss; idx >= 0; --idx) {
        const Node& n = nodes_[static_cast<std::size_t>(idx)];
        const double* gy = grads_.data() + n.off;
        const double* y = values_.data() + n.off;
        switch (n.op) {
            case Op::kInput:
                break;
            case Op::kParam: {
                Tensor* g = bound_grads_[static_cast<std::size_t>(n.param)];
                for (int i = 0; i < n.len; ++i) {
                    g->data[static_cast<std::size_t>(i)] += gy[i];
                }
                break;
            }
            case Op::kMatVec: {
                const Node& wn = nodes_[static_cast<std::size_t>(n.a)];
                const Node& xn = nodes_[static_cast<std::size_t>(n.b)];
                const int rows = n.i0;
                const int cols = n.i1;
                double* gw = grads_.data() + wn.off;
                double* gx = grads_.data() + xn.off;
                const double* w = values_.data() + wn.off;
                const double* x = values_.data() + xn.off;
                for (int i = 0; i < rows; ++i) {
                    const double g = gy[i];
                    if (g == 0.0) continue;
                    double* gwr = gw + static_cast<std::size_t>(i) * cols;
                    const double* wr = w + static_cast<std::size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j) {
                        gwr[j] += g * x[j];
                        gx[j] += g * wr[j];
                    }
                }
                break;
            }
            case Op::kAdd: {
                double* ga = grads_.data() + nodes_[static_cast<std::size_t>(n.a)].off;
                double* gb = grads_.data() + nodes_[static_cast<std::size_t>(n.b)].off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i];
                    gb[i] += gy[i];
                }
                break;
            }
            case Op::kSub: {
                double* ga = grads_.data() + nodes_[static_cast<std::size_t>(n.a)].off;
                double* gb = grads_.data() + nodes_[static_cast<std::size_t>(n.b)].off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i];
                    gb[i] -= gy[i];
                }
                break;
            }
            case Op::kMul: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                const Node& bn = nodes_[static_cast<std::size_t>(n.b)];
                double* ga = grads_.data() + an.off;
                double* gb = grads_.data() + bn.off;
                const double* a = values_.data() + an.off;
                const double* b = values_.data() + bn.off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] * b[i];
                    gb[i] += gy[i] * a[i];
                }
                break;
            }
            case Op::kScale: {
                double* ga = grads_.data() + nodes_[static_cast<std::size_t>(n.a)].off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] * n.d0;
                }
                break;
            }
            case Op::kScaleBy: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                const Node& sn = nodes_[static_cast<std::size_t>(n.b)];
                double* ga = grads_.data() + an.off;
                double* gs = grads_.data() + sn.off;
                const double* a = values_.data() + an.off;
                const double s = values_[sn.off];
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] * s;
                    gs[0] += gy[i] * a[i];
                }
                break;
            }
            case Op::kTanh:
            case Op::kSoftplus:
            case Op::kSigmoid: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off;
                const double* x = values_.data() + an.off;
                const Act act = n.op == Op::kTanh ? Act::kTanh
                              : n.op == Op::kSoftplus ? Act::kSoftplus
                                                      : Act::kSigmoid;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] * kernels::activation_derivative(act, x[i], y[i]);
                }
                break;
            }
            case Op::kExp: {
                double* ga = grads_.data() + nodes_[static_cast<std::size_t>(n.a)].off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] * y[i];
                }
                break;
            }
            case Op::kLog: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off;
                const double* x = values_.data() + an.off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i] / x[i];
                }
                break;
            }
            case Op::kNeg: {
                double* ga = grads_.data() + nodes_[static_cast<std::size_t>(n.a)].off;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] -= gy[i];
                }
                break;
            }
            case Op::kConcat: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                const Node& bn = nodes_[static_cast<std::size_t>(n.b)];
                double* ga = grads_.data() + an.off;
                double* gb = grads_.data() + bn.off;
                for (int i = 0; i < an.len; ++i) {
                    ga[i] += gy[i];
                }
                for (int i = 0; i < bn.len; ++i) {
                    gb[i] += gy[an.len + i];
                }
                break;
            }
            case Op::kSum: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off;
                for (int i = 0; i < an.len; ++i) {
                    ga[i] += gy[0];
                }
                break;
            }
            case Op::kDot: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                const Node& bn = nodes_[static_cast<std::size_t>(n.b)];
                double* ga = grads_.data() + an.off;
                double* gb = grads_.data() + bn.off;
                const double* a = values_.data() + an.off;
                const double* b = values_.data() + bn.off;
                for (int i = 0; i < an.len; ++i) {
                    ga[i] += gy[0] * b[i];
                    gb[i] += gy[0] * a[i];
                }
                break;
            }
            case Op::kSoftmax: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off;
                double inner = 0.0;
                for (int i = 0; i < n.len; ++i) {
                    inner += gy[i] * y[i];
                }
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += y[i] * (gy[i] - inner);
                }
                break;
            }
            case Op::kRow: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off + static_cast<std::size_t>(n.i0) * n.i1;
                for (int i = 0; i < n.len; ++i) {
                    ga[i] += gy[i];
                }
                break;
            }
            case Op::kPick: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                grads_[an.off + static_cast<std::size_t>(n.i0)] += gy[0];
                break;
            }
            case Op::kClamp: {
                const Node& an = nodes_[static_cast<std::size_t>(n.a)];
                double* ga = grads_.data() + an.off;
                const double* x = values_.data() + an.off;
                for (int i = 0; i < n.len; ++i) {
                    if (x[i] > n.d0 && x[i] < n.d1) {
                        ga[i] += gy[i];
                    }
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Registration and forward paths

namespace {

void glorot_fill(Tensor& t, int fan_in, int fan_out, RngStream& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.data) {
        v = rng.uniform(-a, a);
    }
}

}  // namespace

void register_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
                  RngStream& rng, bool zero_last_layer) {
    spec.validate();
    const std::size_t layers = spec.widths.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        Tensor& w = store.create(prefix + ".w" + std::to_string(l),
                                 {static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
        store.create(prefix + ".b" + std::to_string(l), {static_cast<std::size_t>(out)});
        if (!(zero_last_layer && l == layers - 1)) {
            glorot_fill(w, in, out, rng);
        }
    }
}

void register_embedding(ParamStore& store, const std::string& name, int rows, int cols,
                        RngStream& rng) {
    Tensor& t = store.create(name, {static_cast<std::size_t>(rows),
                                    static_cast<std::size_t>(cols)});
    glorot_fill(t, rows, cols, rng);
}

void register_zeros(ParamStore& store, const std::string& name,
                    std::vector<std::size_t> shape) {
    store.create(name, std::move(shape));
}

std::vector<double> mlp_forward_plain(const ParamStore& store, const std::string& prefix,
                                      const MlpSpec& spec, std::span<const double> x) {
    spec.validate();
    if (static_cast<int>(x.size()) != spec.input_width()) {
        throw ContractError("mlp input width mismatch for " + prefix);
    }
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> pre;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        const Tensor& w = store.value(prefix + ".w" + std::to_string(l));
        const Tensor& b = store.value(prefix + ".b" + std::to_string(l));
        pre.assign(static_cast<std::size_t>(out), 0.0);
        kernels::matvec(w.data.data(), cur.data(), pre.data(), out, in);
        for (int i = 0; i < out; ++i) {
            pre[static_cast<std::size_t>(i)] += b.data[static_cast<std::size_t>(i)];
        }
        cur.assign(static_cast<std::size_t>(out), 0.0);
        kernels::activation(spec.acts[l], pre.data(), cur.data(), out);
    }
    return cur;
}

Tape::Var mlp_forward(Tape& tape, const std::string& prefix, const MlpSpec& spec,
                      Tape::Var x) {
    spec.validate();
    if (tape.length(x) != spec.input_width()) {
        throw ContractError("mlp input width mismatch for " + prefix);
    }
    Tape::Var cur = x;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const int in = spec.widths[l];
        const int out = spec.widths[l + 1];
        Tape::Var w = tape.param(prefix + ".w" + std::to_string(l));
        Tape::Var b = tape.param(prefix + ".b" + std::to_string(l));
        cur = tape.add(tape.matvec(w, cur, out, in), b);
        cur = tape.activation(cur, spec.acts[l]);
    }
    return cur;
}

void register_attention(ParamStore& store, const std::string& prefix,
                        const AttentionSpec& spec, RngStream& rng) {
    Tensor& w = store.create(prefix + ".w", {static_cast<std::size_t>(spec.att_dim),
                                             static_cast<std::size_t>(spec.in_dim)});
    glorot_fill(w, spec.in_dim, spec.att_dim, rng);
    Tensor& v = store.create(prefix + ".v", {static_cast<std::size_t>(spec.att_dim)});
    glorot_fill(v, spec.att_dim, 1, rng);
    Tensor& vw = store.create(prefix + ".value_w", {static_cast<std::size_t>(spec.out_dim),
                                                    static_cast<std::size_t>(spec.in_dim)});
    glorot_fill(vw, spec.in_dim, spec.out_dim, rng);
    store.create(prefix + ".value_b", {static_cast<std::size_t>(spec.out_dim)});
}

std::vector<double> attention_weights_plain(const ParamStore& store, const std::string& prefix,
                                            const AttentionSpec& spec,
                                            const std::vector<std::vector<double>>& xs) {
    if (xs.empty()) {
        throw ContractError("attention over an empty set");
    }
    const Tensor& w = store.value(prefix + ".w");
    const Tensor& v = store.value(prefix + ".v");
    std::vector<double> scores(xs.size(), 0.0);
    std::vector<double> proj(static_cast<std::size_t>(spec.att_dim), 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (static_cast<int>(xs[i].size()) != spec.in_dim) {
            throw ContractError("attention input width mismatch");
        }
        kernels::matvec(w.data.data(), xs[i].data(), proj.data(), spec.att_dim, spec.in_dim);
        double s = 0.0;
        for (int j = 0; j < spec.att_dim; ++j) {
            s += v.data[static_cast<std::size_t>(j)] *
                 std::tanh(proj[static_cast<std::size_t>(j)]);
        }
        scores[i] = s;
    }
    std::vector<double> weights(xs.size(), 0.0);
    kernels::softmax(scores.data(), weights.data(), static_cast<int>(xs.size()));
    return weights;
}

std::vector<double> attention_pool_plain(const ParamStore& store, const std::string& prefix,
                                         const AttentionSpec& spec,
                                         const std::vector<std::vector<double>>& xs) {
    const std::vector<double> weights = attention_weights_plain(store, prefix, spec, xs);
    const Tensor& vw = store.value(prefix + ".value_w");
    const Tensor& vb = store.value(prefix + ".value_b");
    std::vector<double> out(static_cast<std::size_t>(spec.out_dim), 0.0);
    std::vector<double> val(static_cast<std::size_t>(spec.out_dim), 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        kernels::matvec(vw.data.data(), xs[i].data(), val.data(), spec.out_dim, spec.in_dim);
        for (int j = 0; j < spec.out_dim; ++j) {
            out[static_cast<std::size_t>(j)] +=
                weights[i] * (val[static_cast<std::size_t>(j)] +
                              vb.data[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

Tape::Var attention_pool(Tape& tape, const std::string& prefix, const AttentionSpec& spec,
                         const std::vector<Tape::Var>& xs) {
    if (xs.empty()) {
        throw ContractError("attention over an empty set");
    }
    Tape::Var w = tape.param(prefix + ".w");
    Tape::Var v = tape.param(prefix + ".v");
    Tape::Var vw = tape.param(prefix + ".value_w");
    Tape::Var vb = tape.param(prefix + ".value_b");
    Tape::Var scores = -1;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        Tape::Var proj = tape.activation(tape.matvec(w, xs[i], spec.att_dim, spec.in_dim),
                                         Act::kTanh);
        Tape::Var s = tape.dot(v, proj);
        scores = (i == 0) ? s : tape.concat(scores, s);
    }
    Tape::Var weights = tape.softmax(scores);
    Tape::Var out = -1;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        Tape::Var val = tape.add(tape.matvec(vw, xs[i], spec.out_dim, spec.in_dim), vb);
        Tape::Var term = tape.scale_by(val, tape.pick(weights, static_cast<int>(i)));
        out = (i == 0) ? term : tape.add(out, term);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(ParamStore& store, AdamState& state, const std::vector<std::string>& names) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& name : names) {
        Tensor& value = store.value(name);
        const Tensor& grad = store.grad(name);
        auto& [m, v] = state.moments[name];
        if (m.size() != value.size()) {
            m.assign(value.size(), 0.0);
            v.assign(value.size(), 0.0);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad.data[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            value.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
using nlohmann::json;
}

std::string params_to_json(const ParamStore& store) {
    json tensors = json::object();
    for (const auto& name : store.names()) {
        const Tensor& t = store.value(name);
        tensors[name] = json{{"shape", t.shape}, {"data", t.data}};
    }
    json j;
    j["version"] = ParamStore::kVersion;
    j["tensors"] = std::move(tensors);
    return j.dump();
}

void save_params(const ParamStore& store, const std::string& path) {
    atomic_write(path, params_to_json(store));
}

ParamStore params_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError("checkpoint parse error: " + std::string(e.what()));
    }
    if (!j.contains("version") || !j["version"].is_number_integer()) {
        throw ValidationError("checkpoint missing version tag");
    }
    if (j["version"].get<int>() != ParamStore::kVersion) {
        throw ValidationError("checkpoint version mismatch: expected " +
                              std::to_string(ParamStore::kVersion) + ", found " +
                              std::to_string(j["version"].get<int>()));
    }
    if (!j.contains("tensors") || !j["tensors"].is_object()) {
        throw ValidationError("checkpoint missing tensors object");
    }
    ParamStore store;
    for (const auto& item : j["tensors"].items()) {
        const json& t = item.value();
        if (!t.contains("shape") || !t.contains("data")) {
            throw ValidationError("checkpoint tensor \"" + item.key() +
                                  "\" missing shape or data");
        }
        auto shape = t["shape"].get<std::vector<std::size_t>>();
        auto data = t["data"].get<std::vector<double>>();
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        if (n != data.size()) {
            throw ValidationError("checkpoint tensor \"" + item.key() +
                                  "\" shape/data size mismatch");
        }
        Tensor& dst = store.create(item.key(), std::move(shape));
        dst.data = std::move(data);
    }
    return store;
}

ParamStore load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open checkpoint: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return params_from_json(buf.str());
}

ParamStore load_params(const std::string& path, const std::vector<std::string>& expected) {
    ParamStore store = load_params(path);
    const std::vector<std::string> found = store.names();
    for (const auto& name : found) {
        if (std::find(expected.begin(), expected.end(), name) == expected.end()) {
            throw ValidationError("checkpoint has unknown parameter name \"" + name + "\"");
        }
    }
    for (const auto& name : expected) {
        if (!store.has(name)) {
            throw ValidationError("checkpoint is missing parameter \"" + name + "\"");
        }
    }
    return store;
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check_fn(ParamStore& store, const std::vector<std::string>& names,
                     const std::function<Tape::Var(Tape&)>& loss_builder, double fd_eps) {
    store.zero_grads();
    {
        Tape tape(&store);
        Tape::Var loss = loss_builder(tape);
        tape.backward(loss);
    }
    double max_rel = 0.0;
    for (const auto& name : names) {
        Tensor& value = store.value(name);
        const Tensor& grad = store.grad(name);
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value.data[i];
            value.data[i] = saved + fd_eps;
            Tape tp(&store);
            const double up = tp.scalar(loss_builder(tp));
            value.data[i] = saved - fd_eps;
            Tape tm(&store);
            const double dn = tm.scalar(loss_builder(tm));
            value.data[i] = saved;
            const double fd = (up - dn) / (2.0 * fd_eps);
            const double ad = grad.data[i];
            const double rel = std::abs(ad - fd) /
                               std::max({1.0, std::abs(ad), std::abs(fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

double grad_check(const MlpSpec& spec, std::uint64_t seed) {
    RngStream rng(seed, 0);
    ParamStore store;
    register_mlp(store, "net", spec, rng);
    std::vector<double> x(static_cast<std::size_t>(spec.input_width()));
    for (double& v : x) {
        v = rng.uniform(-1.0, 1.0);
    }
    std::vector<double> readout(static_cast<std::size_t>(spec.output_width()));
    for (double& v : readout) {
        v = rng.uniform(-1.0, 1.0);
    }
    auto loss_builder = [&](Tape& tape) {
        Tape::Var out = mlp_forward(tape, "net", spec, tape.input(x));
        return tape.dot(out, tape.input(readout));
    };
    return grad_check_fn(store, store.names(), loss_builder);
}

}  // namespace sand::net
