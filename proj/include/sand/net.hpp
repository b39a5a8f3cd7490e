#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sand/core.hpp"

namespace sand::net {

enum class Act { kIdentity, kTanh, kSoftplus, kSigmoid };

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t size() const { return data.size(); }
};

// Named parameter arrays with matching gradient slots. Iteration order is
// name-sorted, which keeps optimizer updates and serialization deterministic.
class ParamStore {
  public:
    static constexpr int kVersion = 1;

    Tensor& create(const std::string& name, std::vector<std::size_t> shape);
    bool has(const std::string& name) const;
    Tensor& value(const std::string& name);
    const Tensor& value(const std::string& name) const;
    Tensor& grad(const std::string& name);
    const Tensor& grad(const std::string& name) const;

    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    void zero_grads();

    double grad_norm(const std::vector<std::string>& names) const;
    void scale_grads(const std::vector<std::string>& names, double factor);
    void clip_grad_norm(const std::vector<std::string>& names, double max_norm);

  private:
    struct Entry {
        Tensor value;
        Tensor grad;
    };
    std::map<std::string, Entry> entries_;
};

struct MlpSpec {
    std::vector<int> widths;  // [in, ..., out], >= 2 entries
    std::vector<Act> acts;    // one per layer

    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }
    void validate() const;
};

MlpSpec make_mlp_spec(std::vector<int> widths, Act hidden_act, Act out_act);

// Shared arithmetic kernels. Both the plain and the taped forward paths go
// through these, so the two produce bit-identical values.
namespace kernels {
void matvec(const double* w, const double* x, double* y, int rows, int cols);
void softmax(const double* x, double* y, int n);
double softplus(double x);
double sigmoid(double x);
void activation(Act act, const double* x, double* y, int n);
double activation_derivative(Act act, double x, double y);
}  // namespace kernels

// Reverse-mode tape. Vars index nodes in creation order; backward() walks
// them in reverse and accumulates parameter gradients into the bound store.
// A tape is a single-use record: backward() twice is a contract error.
class Tape {
  public:
    using Var = int;

    explicit Tape(ParamStore* store = nullptr) : store_(store) {}

    void clear();

    Var param(const std::string& name);  // cached; one leaf per name per tape
    Var input(std::span<const double> v);
    Var constant(double v);

    Var matvec(Var w, Var x, int rows, int cols);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var scale_by(Var a, Var scalar);
    Var activation(Var a, Act act);
    Var exp_of(Var a);
    Var log_of(Var a);
    Var neg(Var a);
    Var concat(Var a, Var b);
    Var sum(Var a);
    Var dot(Var a, Var b);
    Var softmax(Var a);
    Var row(Var table, int row_index, int row_len);
    Var pick(Var a, int index);
    Var clamp(Var a, double lo, double hi);

    std::span<const double> value(Var v) const;
    double scalar(Var v) const;
    int length(Var v) const;
    std::size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss) = seed and accumulates gradients additively into the
    // bound ParamStore. Consumes the record.
    void backward(Var loss, double seed = 1.0);

  private:
    enum class Op {
        kParam, kInput, kMatVec, kAdd, kSub, kMul, kScale, kScaleBy,
        kTanh, kSoftplus, kSigmoid, kExp, kLog, kNeg, kConcat, kSum,
        kDot, kSoftmax, kRow, kPick, kClamp,
    };
    struct Node {
        Op op;
        int a = -1;
        int b = -1;
        std::size_t off = 0;
        int len = 0;
        int i0 = 0;
        int i1 = 0;
        double d0 = 0.0;
        double d1 = 0.0;
        int param = -1;
    };

    Var push(Op op, int len, int a = -1, int b = -1);
    double* data(Var v) { return values_.data() + nodes_[static_cast<std::size_t>(v)].off; }
    const double* data(Var v) const {
        return values_.data() + nodes_[static_cast<std::size_t>(v)].off;
    }
    void check_var(Var v) const;

    ParamStore* store_ = nullptr;
    std::vector<Node> nodes_;
    std::vector<double> values_;
    std::vector<double> grads_;
    std::map<std::string, Var> param_cache_;
    std::vector<Tensor*> bound_grads_;
    bool consumed_ = false;
};

// Parameter registration. MLP layer l gets "<prefix>.w<l>" with shape
// (out, in) row-major and "<prefix>.b<l>". Weights are Glorot-uniform,
// biases zero; zero_last_layer forces the final layer to all zeros.
void register_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
                  RngStream& rng, bool zero_last_layer = false);
void register_embedding(ParamStore& store, const std::string& name, int rows, int cols,
                        RngStream& rng);
void register_zeros(ParamStore& store, const std::string& name,
                    std::vector<std::size_t> shape);

std::vector<double> mlp_forward_plain(const ParamStore& store, const std::string& prefix,
                                      const MlpSpec& spec, std::span<const double> x);
Tape::Var mlp_forward(Tape& tape, const std::string& prefix, const MlpSpec& spec,
                      Tape::Var x);

struct AttentionSpec {
    int in_dim = 0;
    int att_dim = 0;
    int out_dim = 0;
};

void register_attention(ParamStore& store, const std::string& prefix,
                        const AttentionSpec& spec, RngStream& rng);
std::vector<double> attention_pool_plain(const ParamStore& store, const std::string& prefix,
                                         const AttentionSpec& spec,
                                         const std::vector<std::vector<double>>& xs);
std::vector<double> attention_weights_plain(const ParamStore& store, const std::string& prefix,
                                            const AttentionSpec& spec,
                                            const std::vector<std::vector<double>>& xs);
Tape::Var attention_pool(Tape& tape, const std::string& prefix, const AttentionSpec& spec,
                         const std::vector<Tape::Var>& xs);

// Standard Adam with bias correction over a fixed name group.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

void adam_step(ParamStore& store, AdamState& state, const std::vector<std::string>& names);

// Checkpoint file: {"version":1,"tensors":{name:{"shape":[...],"data":[...]}}}.
// Round-trip is value-exact.
void save_params(const ParamStore& store, const std::string& path);
std::string params_to_json(const ParamStore& store);
ParamStore load_params(const std::string& path);
ParamStore params_from_json(const std::string& text);
// Validates the file's name set against `expected` and reports mismatches.
ParamStore load_params(const std::string& path, const std::vector<std::string>& expected);

// Central-difference comparison of tape gradients for an arbitrary scalar
// loss over the named parameters. Returns the max relative error, with
// relative error |a-f| / max(1, |a|, |f|).
double grad_check_fn(ParamStore& store, const std::vector<std::string>& names,
                     const std::function<Tape::Var(Tape&)>& loss_builder,
                     double fd_eps = 1e-4);

// Random MLP + random linear readout; used by tests and the CLI self-check.
double grad_check(const MlpSpec& spec, std::uint64_t seed);

}  // namespace sand::net
