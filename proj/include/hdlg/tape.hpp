#pragma once

#include <algorithm>
#include <cassert>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdlg/rng.hpp"
#include "hdlg/tensor.hpp"

namespace hdlg {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename S>
using GradMap = std::map<std::string, Tensor<S>>;

template <typename S>
struct ParameterStore {
    std::map<std::string, Tensor<S>> tensors;

    Tensor<S>& add(const std::string& name, Shape shape) {
        auto [it, fresh] = tensors.emplace(name, Tensor<S>(std::move(shape)));
        if (!fresh) throw std::runtime_error("duplicate parameter name: " + name);
        return it->second;
    }
    const Tensor<S>& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("unknown parameter: " + name);
        return it->second;
    }
    Tensor<S>& get(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    long long total_count() const {
        long long n = 0;
        for (auto& [k, v] : tensors) n += v.size();
        return n;
    }
    template <typename T>
    ParameterStore<T> cast() const {
        ParameterStore<T> out;
        for (auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<T>());
        return out;
    }
};

// Eagerly evaluated computation record. Each op appends a node holding the
// forward value plus a closure that pulls the node's gradient back into its
// parents. Nodes are created in topological order, so the backward pass is a
// single reverse sweep.
template <typename S>
class Tape {
public:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;  // allocated lazily during backward
        bool needs_grad = false;
        std::function<void(Tape&)> backward;
    };

    // ---- leaves ---------------------------------------------------------

    Var leaf(Tensor<S> value, bool needs_grad = false) {
        return push(std::move(value), needs_grad, nullptr);
    }

    Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

    Var scalar(S v) { return constant(Tensor<S>::scalar(v)); }

    // Parameter leaf; the same name always maps to the same node so tied
    // weights accumulate gradient in one place.
    Var param(const ParameterStore<S>& store, const std::string& name) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return Var{it->second};
        Var v = leaf(store.get(name), true);
        param_nodes_.emplace(name, v.id);
        return v;
    }

    const Tensor<S>& val(Var v) const { return nodes_[v.id].value; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
    size_t size() const { return nodes_.size(); }

    // ---- primitive ops --------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw ShapeError("matmul", shape_str(A.shape) + " x " + shape_str(B.shape));
        int m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor<S> C(Shape{m, n});
        matmul_raw(A.data.data(), B.data.data(), C.data.data(), m, k, n, false);
        return push(std::move(C), needs_grad(a) || needs_grad(b), [a, b, m, k, n](Tape& t) {
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            if (t.needs_grad(a)) {
                // dA += g . B^T
                Tensor<S>& dA = t.grad_buf(a);
                const Tensor<S>& B2 = t.val(b);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        S gv = g.data[static_cast<size_t>(i) * n + j];
                        if (gv == S(0)) continue;
                        for (int p = 0; p < k; ++p)
                            dA.data[static_cast<size_t>(i) * k + p] +=
                                gv * B2.data[static_cast<size_t>(p) * n + j];
                    }
            }
            if (t.needs_grad(b)) {
                // dB += A^T . g
                Tensor<S>& dB = t.grad_buf(b);
                const Tensor<S>& A2 = t.val(a);
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        S av = A2.data[static_cast<size_t>(i) * k + p];
                        if (av == S(0)) continue;
                        for (int j = 0; j < n; ++j)
                            dB.data[static_cast<size_t>(p) * n + j] += av * g.data[static_cast<size_t>(i) * n + j];
                    }
            }
        });
    }

    // b either matches a exactly or is rank-1 broadcast across rows of a
    Var add(Var a, Var b) { return add_like("add", a, b, S(1)); }
    Var sub(Var a, Var b) { return add_like("sub", a, b, S(-1)); }

    Var mul(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        bool bcast = broadcast_ok(A, B);
        if (!bcast && !A.same_shape(B))
            throw ShapeError("mul", shape_str(A.shape) + " vs " + shape_str(B.shape));
        Tensor<S> out(A.shape);
        int n = bcast ? B.shape[0] : 0;
        for (size_t i = 0; i < A.data.size(); ++i)
            out.data[i] = A.data[i] * (bcast ? B.data[i % n] : B.data[i]);
        return push(std::move(out), needs_grad(a) || needs_grad(b), [a, b, bcast, n](Tape& t) {
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>&A = t.val(a), &B = t.val(b);
            if (t.needs_grad(a)) {
                Tensor<S>& dA = t.grad_buf(a);
                for (size_t i = 0; i < g.data.size(); ++i)
                    dA.data[i] += g.data[i] * (bcast ? B.data[i % n] : B.data[i]);
            }
            if (t.needs_grad(b)) {
                Tensor<S>& dB = t.grad_buf(b);
                for (size_t i = 0; i < g.data.size(); ++i)
                    dB.data[bcast ? i % n : i] += g.data[i] * A.data[i];
            }
        });
    }

    Var scale(Var a, S c) {
        Tensor<S> out(val(a).shape);
        const Tensor<S>& A = val(a);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = A.data[i] * c;
        return push(std::move(out), needs_grad(a), [a, c](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i] * c;
        });
    }

    // row-wise softmax over the last axis. Entries equal to -inf contribute
    // exactly zero; a fully -inf row yields an all-zero row (empty context).
    Var softmax(Var a) {
        const Tensor<S>& A = val(a);
        if (A.rank() != 2 && A.rank() != 1) throw ShapeError("softmax", shape_str(A.shape));
        int rows = A.rank() == 2 ? A.shape[0] : 1;
        int cols = A.rank() == 2 ? A.shape[1] : A.shape[0];
        Tensor<S> out(A.shape);
        const S ninf = -std::numeric_limits<S>::infinity();
        for (int i = 0; i < rows; ++i) {
            const S* x = &A.data[static_cast<size_t>(i) * cols];
            S* y = &out.data[static_cast<size_t>(i) * cols];
            S mx = ninf;
            for (int j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
            if (mx == ninf) {
                for (int j = 0; j < cols; ++j) y[j] = S(0);
                continue;
            }
            S sum = S(0);
            for (int j = 0; j < cols; ++j) {
                y[j] = x[j] == ninf ? S(0) : std::exp(x[j] - mx);
                sum += y[j];
            }
            for (int j = 0; j < cols; ++j) y[j] /= sum;
        }
        return push(std::move(out), needs_grad(a), [a, rows, cols](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& y = t.nodes_[t.cur_].value;
            Tensor<S>& dA = t.grad_buf(a);
            for (int i = 0; i < rows; ++i) {
                const S* gi = &g.data[static_cast<size_t>(i) * cols];
                const S* yi = &y.data[static_cast<size_t>(i) * cols];
                S dot = S(0);
                for (int j = 0; j < cols; ++j) dot += gi[j] * yi[j];
                S* d = &dA.data[static_cast<size_t>(i) * cols];
                for (int j = 0; j < cols; ++j) d[j] += yi[j] * (gi[j] - dot);
            }
        });
    }

    Var gelu(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) {
            double x = static_cast<double>(A.data[i]);
            out.data[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)));
        }
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& A = t.val(a);
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double x = static_cast<double>(A.data[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                dA.data[i] += g.data[i] * static_cast<S>(cdf + x * pdf);
            }
        });
    }

    Var relu(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = A.data[i] > S(0) ? A.data[i] : S(0);
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& A = t.val(a);
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (A.data[i] > S(0)) dA.data[i] += g.data[i];
        });
    }

    Var tanh_(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = std::tanh(A.data[i]);
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& y = t.nodes_[t.cur_].value;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                dA.data[i] += g.data[i] * (S(1) - y.data[i] * y.data[i]);
        });
    }

    Var sigmoid(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) {
            double x = static_cast<double>(A.data[i]);
            out.data[i] = static_cast<S>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                                : std::exp(x) / (1.0 + std::exp(x)));
        }
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& y = t.nodes_[t.cur_].value;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                dA.data[i] += g.data[i] * y.data[i] * (S(1) - y.data[i]);
        });
    }

    // row-wise normalization over the last axis; affine gain/bias are applied
    // by the caller with mul/add
    Var layer_norm(Var a, S eps = S(1e-5)) {
        const Tensor<S>& A = val(a);
        if (A.rank() != 2 && A.rank() != 1) throw ShapeError("layer_norm", shape_str(A.shape));
        int rows = A.rank() == 2 ? A.shape[0] : 1;
        int cols = A.rank() == 2 ? A.shape[1] : A.shape[0];
        Tensor<S> out(A.shape);
        for (int i = 0; i < rows; ++i) {
            const S* x = &A.data[static_cast<size_t>(i) * cols];
            S* y = &out.data[static_cast<size_t>(i) * cols];
            S mean = S(0), var = S(0);
            for (int j = 0; j < cols; ++j) mean += x[j];
            mean /= cols;
            for (int j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
            var /= cols;
            S inv = S(1) / std::sqrt(var + eps);
            for (int j = 0; j < cols; ++j) y[j] = (x[j] - mean) * inv;
        }
        return push(std::move(out), needs_grad(a), [a, rows, cols, eps](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& A = t.val(a);
            Tensor<S>& dA = t.grad_buf(a);
            for (int i = 0; i < rows; ++i) {
                const S* x = &A.data[static_cast<size_t>(i) * cols];
                const S* gi = &g.data[static_cast<size_t>(i) * cols];
                S mean = S(0), var = S(0);
                for (int j = 0; j < cols; ++j) mean += x[j];
                mean /= cols;
                for (int j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
                var /= cols;
                S inv = S(1) / std::sqrt(var + eps);
                S gmean = S(0), gxhat = S(0);
                for (int j = 0; j < cols; ++j) {
                    gmean += gi[j];
                    gxhat += gi[j] * (x[j] - mean) * inv;
                }
                gmean /= cols;
                gxhat /= cols;
                S* d = &dA.data[static_cast<size_t>(i) * cols];
                for (int j = 0; j < cols; ++j) {
                    S xhat = (x[j] - mean) * inv;
                    d[j] += inv * (gi[j] - gmean - xhat * gxhat);
                }
            }
        });
    }

    // inverted dropout; identity when rate==0 or in eval mode
    Var dropout(Var a, double rate, Rng& rng, bool train) {
        if (!train || rate <= 0.0) return a;
        const Tensor<S>& A = val(a);
        auto keep = std::make_shared<std::vector<uint8_t>>(A.data.size());
        S inv = static_cast<S>(1.0 / (1.0 - rate));
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) {
            (*keep)[i] = rng.uniform() >= rate ? 1 : 0;
            out.data[i] = (*keep)[i] ? A.data[i] * inv : S(0);
        }
        return push(std::move(out), needs_grad(a), [a, keep, inv](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                if ((*keep)[i]) dA.data[i] += g.data[i] * inv;
        });
    }

    // rows of `table` gathered by index; also serves as a row gather on any
    // rank-2 node
    Var embedding_lookup(Var table, std::vector<int> ids) {
        const Tensor<S>& T = val(table);
        if (T.rank() != 2) throw ShapeError("embedding_lookup", shape_str(T.shape));
        int d = T.shape[1];
        for (int id : ids)
            if (id < 0 || id >= T.shape[0])
                throw ShapeError("embedding_lookup",
                                 "index " + std::to_string(id) + " out of " + shape_str(T.shape));
        Tensor<S> out(Shape{static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(&T.data[static_cast<size_t>(ids[i]) * d], d, &out.data[i * d]);
        auto idp = std::make_shared<std::vector<int>>(std::move(ids));
        return push(std::move(out), needs_grad(table), [table, idp, d](Tape& t) {
            if (!t.needs_grad(table)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dT = t.grad_buf(table);
            for (size_t i = 0; i < idp->size(); ++i) {
                S* dst = &dT.data[static_cast<size_t>((*idp)[i]) * d];
                const S* src = &g.data[i * d];
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }

    Var concat_rows(const std::vector<Var>& parts) { return concat_axis(parts, 0); }
    Var concat_cols(const std::vector<Var>& parts) { return concat_axis(parts, 1); }

    Var slice_rows(Var a, int start, int len) { return slice_axis(a, 0, start, len); }
    Var slice_cols(Var a, int start, int len) { return slice_axis(a, 1, start, len); }

    // fills positions where mask != 0; gradient is blocked there
    Var masked_fill(Var a, std::vector<uint8_t> mask, S fill) {
        const Tensor<S>& A = val(a);
        if (mask.size() != A.data.size())
            throw ShapeError("masked_fill", "mask length " + std::to_string(mask.size()) +
                                                " vs tensor " + shape_str(A.shape));
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = mask[i] ? fill : A.data[i];
        auto mp = std::make_shared<std::vector<uint8_t>>(std::move(mask));
        return push(std::move(out), needs_grad(a), [a, mp](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (!(*mp)[i]) dA.data[i] += g.data[i];
        });
    }

    Var log_(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = std::log(A.data[i]);
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& A = t.val(a);
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i] / A.data[i];
        });
    }

    Var exp_(Var a) {
        const Tensor<S>& A = val(a);
        Tensor<S> out(A.shape);
        for (size_t i = 0; i < A.data.size(); ++i) out.data[i] = std::exp(A.data[i]);
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& y = t.nodes_[t.cur_].value;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i] * y.data[i];
        });
    }

    // per-row negative log likelihood of targets[i] under softmax(logits[i])
    Var cross_entropy(Var logits, std::vector<int> targets) {
        const Tensor<S>& L = val(logits);
        if (L.rank() != 2) throw ShapeError("cross_entropy", shape_str(L.shape));
        int m = L.shape[0], v = L.shape[1];
        if (static_cast<int>(targets.size()) != m)
            throw ShapeError("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                                  std::to_string(m) + " rows");
        for (int tgt : targets)
            if (tgt < 0 || tgt >= v)
                throw ShapeError("cross_entropy", "target " + std::to_string(tgt) + " out of vocab " +
                                                      std::to_string(v));
        Tensor<S> out(Shape{m});
        for (int i = 0; i < m; ++i) {
            const S* x = &L.data[static_cast<size_t>(i) * v];
            S mx = x[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
            S sum = S(0);
            for (int j = 0; j < v; ++j) sum += std::exp(x[j] - mx);
            out.data[i] = std::log(sum) + mx - x[targets[i]];
        }
        auto tp = std::make_shared<std::vector<int>>(std::move(targets));
        return push(std::move(out), needs_grad(logits), [logits, tp, m, v](Tape& t) {
            if (!t.needs_grad(logits)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            const Tensor<S>& L = t.val(logits);
            Tensor<S>& dL = t.grad_buf(logits);
            for (int i = 0; i < m; ++i) {
                const S* x = &L.data[static_cast<size_t>(i) * v];
                S* d = &dL.data[static_cast<size_t>(i) * v];
                S mx = x[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
                S sum = S(0);
                for (int j = 0; j < v; ++j) sum += std::exp(x[j] - mx);
                S gi = g.data[i];
                for (int j = 0; j < v; ++j) d[j] += gi * std::exp(x[j] - mx) / sum;
                d[(*tp)[i]] -= gi;
            }
        });
    }

    Var sum(Var a) {
        const Tensor<S>& A = val(a);
        S s = S(0);
        for (S x : A.data) s += x;
        return push(Tensor<S>::scalar(s), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            S g = t.nodes_[t.cur_].grad.data[0];
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < dA.data.size(); ++i) dA.data[i] += g;
        });
    }

    Var transpose(Var a) {
        const Tensor<S>& A = val(a);
        if (A.rank() != 2) throw ShapeError("transpose", shape_str(A.shape));
        int m = A.shape[0], n = A.shape[1];
        Tensor<S> out(Shape{n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out.data[static_cast<size_t>(j) * m + i] = A.data[static_cast<size_t>(i) * n + j];
        return push(std::move(out), needs_grad(a), [a, m, n](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dA = t.grad_buf(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    dA.data[static_cast<size_t>(i) * n + j] += g.data[static_cast<size_t>(j) * m + i];
        });
    }

    Var reshape(Var a, Shape shape) {
        const Tensor<S>& A = val(a);
        if (numel(shape) != A.size())
            throw ShapeError("reshape", shape_str(A.shape) + " -> " + shape_str(shape));
        Tensor<S> out(std::move(shape));
        out.data = A.data;
        return push(std::move(out), needs_grad(a), [a](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            Tensor<S>& dA = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i];
        });
    }

    // Linear-chain CRF negative log likelihood with analytic gradient via
    // forward/backward marginals. emissions: [T,L]; trans: [L,L]; start,end: [L].
    Var crf_nll(Var emissions, Var trans, Var start, Var end, std::vector<int> gold) {
        const Tensor<S>& E = val(emissions);
        if (E.rank() != 2) throw ShapeError("crf_nll", shape_str(E.shape));
        int T = E.shape[0], L = E.shape[1];
        const Tensor<S>&W = val(trans), &st = val(start), &en = val(end);
        if (W.shape != Shape{L, L} || st.shape != Shape{L} || en.shape != Shape{L})
            throw ShapeError("crf_nll", "trans " + shape_str(W.shape) + " start " +
                                            shape_str(st.shape) + " end " + shape_str(en.shape) +
                                            " for L=" + std::to_string(L));
        if (static_cast<int>(gold.size()) != T)
            throw ShapeError("crf_nll", "gold length " + std::to_string(gold.size()) + " vs T=" +
                                            std::to_string(T));
        // forward pass in log space
        std::vector<S> alpha(static_cast<size_t>(T) * L);
        for (int j = 0; j < L; ++j) alpha[j] = st.data[j] + E.at(0, j);
        for (int t = 1; t < T; ++t)
            for (int j = 0; j < L; ++j) {
                S m = -std::numeric_limits<S>::infinity();
                for (int i = 0; i < L; ++i)
                    m = std::max(m, alpha[static_cast<size_t>(t - 1) * L + i] + W.at(i, j));
                S s = S(0);
                for (int i = 0; i < L; ++i)
                    s += std::exp(alpha[static_cast<size_t>(t - 1) * L + i] + W.at(i, j) - m);
                alpha[static_cast<size_t>(t) * L + j] = m + std::log(s) + E.at(t, j);
            }
        S mz = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < L; ++j) mz = std::max(mz, alpha[static_cast<size_t>(T - 1) * L + j] + en.data[j]);
        S sz = S(0);
        for (int j = 0; j < L; ++j) sz += std::exp(alpha[static_cast<size_t>(T - 1) * L + j] + en.data[j] - mz);
        S log_z = mz + std::log(sz);
        // gold path score
        S score = st.data[gold[0]] + E.at(0, gold[0]);
        for (int t = 1; t < T; ++t) score += W.at(gold[t - 1], gold[t]) + E.at(t, gold[t]);
        score += en.data[gold[T - 1]];
        S nll = log_z - score;

        auto gp = std::make_shared<std::vector<int>>(std::move(gold));
        auto ap = std::make_shared<std::vector<S>>(std::move(alpha));
        return push(Tensor<S>::scalar(nll),
                    needs_grad(emissions) || needs_grad(trans) || needs_grad(start) || needs_grad(end),
                    [emissions, trans, start, end, gp, ap, T, L, log_z](Tape& t) {
                        S gup = t.nodes_[t.cur_].grad.data[0];
                        const Tensor<S>& E = t.val(emissions);
                        const Tensor<S>& W = t.val(trans);
                        const Tensor<S>& en = t.val(end);
                        const std::vector<S>& alpha = *ap;
                        // backward pass
                        std::vector<S> beta(static_cast<size_t>(T) * L);
                        for (int j = 0; j < L; ++j) beta[static_cast<size_t>(T - 1) * L + j] = en.data[j];
                        for (int tt = T - 2; tt >= 0; --tt)
                            for (int i = 0; i < L; ++i) {
                                S m = -std::numeric_limits<S>::infinity();
                                for (int j = 0; j < L; ++j)
                                    m = std::max(m, W.at(i, j) + E.at(tt + 1, j) +
                                                        beta[static_cast<size_t>(tt + 1) * L + j]);
                                S s = S(0);
                                for (int j = 0; j < L; ++j)
                                    s += std::exp(W.at(i, j) + E.at(tt + 1, j) +
                                                  beta[static_cast<size_t>(tt + 1) * L + j] - m);
                                beta[static_cast<size_t>(tt) * L + i] = m + std::log(s);
                            }
                        auto unary = [&](int tt, int j) {
                            return std::exp(alpha[static_cast<size_t>(tt) * L + j] +
                                            beta[static_cast<size_t>(tt) * L + j] - log_z);
                        };
                        if (t.needs_grad(emissions)) {
                            Tensor<S>& dE = t.grad_buf(emissions);
                            for (int tt = 0; tt < T; ++tt)
                                for (int j = 0; j < L; ++j) dE.at(tt, j) += gup * unary(tt, j);
                            for (int tt = 0; tt < T; ++tt) dE.at(tt, (*gp)[tt]) -= gup;
                        }
                        if (t.needs_grad(trans)) {
                            Tensor<S>& dW = t.grad_buf(trans);
                            for (int tt = 0; tt + 1 < T; ++tt)
                                for (int i = 0; i < L; ++i)
                                    for (int j = 0; j < L; ++j) {
                                        S pair = std::exp(alpha[static_cast<size_t>(tt) * L + i] +
                                                          W.at(i, j) + E.at(tt + 1, j) +
                                                          beta[static_cast<size_t>(tt + 1) * L + j] -
                                                          log_z);
                                        dW.at(i, j) += gup * pair;
                                    }
                            for (int tt = 0; tt + 1 < T; ++tt) dW.at((*gp)[tt], (*gp)[tt + 1]) -= gup;
                        }
                        if (t.needs_grad(start)) {
                            Tensor<S>& dS = t.grad_buf(start);
                            for (int j = 0; j < L; ++j) dS.data[j] += gup * unary(0, j);
                            dS.data[(*gp)[0]] -= gup;
                        }
                        if (t.needs_grad(end)) {
                            Tensor<S>& dEn = t.grad_buf(end);
                            for (int j = 0; j < L; ++j) dEn.data[j] += gup * unary(T - 1, j);
                            dEn.data[(*gp)[T - 1]] -= gup;
                        }
                    });
    }

    // ---- backward -------------------------------------------------------

    // Reverse sweep from a scalar loss. Returns gradients for every named
    // parameter in `store`; parameters not on the path get zeros.
    std::pair<S, GradMap<S>> forward_backward(Var loss, const ParameterStore<S>& store) {
        run_backward(loss);
        GradMap<S> grads;
        for (auto& [name, tensor] : store.tensors) {
            auto it = param_nodes_.find(name);
            if (it != param_nodes_.end() && nodes_[it->second].grad.size() > 0)
                grads.emplace(name, nodes_[it->second].grad);
            else
                grads.emplace(name, Tensor<S>::zeros(tensor.shape));
        }
        return {val(loss).item(), std::move(grads)};
    }

    // gradient w.r.t. an arbitrary node (zeros if not reached)
    Tensor<S> grad_of(Var v) const {
        const Node& n = nodes_[v.id];
        if (n.grad.size() > 0) return n.grad;
        return Tensor<S>::zeros(n.value.shape);
    }

    void run_backward(Var loss) {
        if (val(loss).size() != 1)
            throw std::runtime_error("forward_backward: loss node is not scalar, shape " +
                                     shape_str(val(loss).shape));
        for (auto& n : nodes_)
            if (n.grad.size() > 0) std::fill(n.grad.data.begin(), n.grad.data.end(), S(0));
        grad_buf(loss).data[0] = S(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) continue;
            cur_ = i;
            n.backward(*this);
        }
    }

    Tensor<S>& grad_buf(Var v) { return grad_buf(v.id); }
    Tensor<S>& grad_buf(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Tensor<S>::zeros(n.value.shape);
        return n.grad;
    }

private:
    std::vector<Node> nodes_;
    std::map<std::string, int> param_nodes_;
    int cur_ = -1;

    Var push(Tensor<S> value, bool needs_grad, std::function<void(Tape&)> backward) {
#ifndef NDEBUG
        if (value.has_nan())
            throw std::runtime_error("NaN produced by tape op (node " +
                                     std::to_string(nodes_.size()) + ")");
#endif
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    static bool broadcast_ok(const Tensor<S>& a, const Tensor<S>& b) {
        return a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1];
    }

    Var add_like(const char* opname, Var a, Var b, S sign) {
        const Tensor<S>&A = val(a), &B = val(b);
        bool bcast = broadcast_ok(A, B);
        if (!bcast && !A.same_shape(B))
            throw ShapeError(opname, shape_str(A.shape) + " vs " + shape_str(B.shape));
        Tensor<S> out(A.shape);
        int n = bcast ? B.shape[0] : 0;
        for (size_t i = 0; i < A.data.size(); ++i)
            out.data[i] = A.data[i] + sign * (bcast ? B.data[i % n] : B.data[i]);
        return push(std::move(out), needs_grad(a) || needs_grad(b), [a, b, bcast, n, sign](Tape& t) {
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            if (t.needs_grad(a)) {
                Tensor<S>& dA = t.grad_buf(a);
                for (size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i];
            }
            if (t.needs_grad(b)) {
                Tensor<S>& dB = t.grad_buf(b);
                for (size_t i = 0; i < g.data.size(); ++i)
                    dB.data[bcast ? i % n : i] += sign * g.data[i];
            }
        });
    }

    Var concat_axis(const std::vector<Var>& parts, int axis) {
        if (parts.empty()) throw ShapeError("concat", "no inputs");
        const Tensor<S>& first = val(parts[0]);
        if (first.rank() != 2) throw ShapeError("concat", shape_str(first.shape));
        int fixed = first.shape[1 - axis];
        int total = 0;
        bool any_grad = false;
        for (Var p : parts) {
            const Tensor<S>& t = val(p);
            if (t.rank() != 2 || t.shape[1 - axis] != fixed)
                throw ShapeError("concat", shape_str(first.shape) + " vs " + shape_str(t.shape));
            total += t.shape[axis];
            any_grad = any_grad || needs_grad(p);
        }
        Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
        Tensor<S> out(shape);
        int off = 0;
        for (Var p : parts) {
            const Tensor<S>& t = val(p);
            copy_block(t, out, axis, 0, off, t.shape[axis]);
            off += t.shape[axis];
        }
        auto pv = std::make_shared<std::vector<Var>>(parts);
        return push(std::move(out), any_grad, [pv, axis](Tape& t) {
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            int off = 0;
            for (Var p : *pv) {
                int len = t.val(p).shape[axis];
                if (t.needs_grad(p)) accum_block(g, t.grad_buf(p), axis, off, 0, len);
                off += len;
            }
        });
    }

    Var slice_axis(Var a, int axis, int start, int len) {
        const Tensor<S>& A = val(a);
        if (A.rank() != 2) throw ShapeError("slice", shape_str(A.shape));
        if (start < 0 || len < 0 || start + len > A.shape[axis])
            throw ShapeError("slice", "range [" + std::to_string(start) + "," +
                                          std::to_string(start + len) + ") out of " +
                                          shape_str(A.shape));
        int fixed = A.shape[1 - axis];
        Shape shape = axis == 0 ? Shape{len, fixed} : Shape{fixed, len};
        Tensor<S> out(shape);
        copy_block(A, out, axis, start, 0, len);
        return push(std::move(out), needs_grad(a), [a, axis, start, len](Tape& t) {
            if (!t.needs_grad(a)) return;
            const Tensor<S>& g = t.nodes_[t.cur_].grad;
            accum_block(g, t.grad_buf(a), axis, 0, start, len);
        });
    }

    // copy `len` rows/cols from src (at src_off along axis) into dst (at dst_off)
    static void copy_block(const Tensor<S>& src, Tensor<S>& dst, int axis, int src_off, int dst_off,
                           int len) {
        if (axis == 0) {
            int cols = src.shape[1];
            std::copy_n(&src.data[static_cast<size_t>(src_off) * cols],
                        static_cast<size_t>(len) * cols,
                        &dst.data[static_cast<size_t>(dst_off) * cols]);
        } else {
            int rows = src.shape[0];
            for (int i = 0; i < rows; ++i)
                std::copy_n(&src.data[static_cast<size_t>(i) * src.shape[1] + src_off], len,
                            &dst.data[static_cast<size_t>(i) * dst.shape[1] + dst_off]);
        }
    }
    static void accum_block(const Tensor<S>& src, Tensor<S>& dst, int axis, int src_off, int dst_off,
                            int len) {
        if (axis == 0) {
            int cols = src.shape[1];
            for (int i = 0; i < len; ++i)
                for (int j = 0; j < cols; ++j)
                    dst.data[static_cast<size_t>(dst_off + i) * cols + j] +=
                        src.data[static_cast<size_t>(src_off + i) * cols + j];
        } else {
            int rows = src.shape[0];
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < len; ++j)
                    dst.data[static_cast<size_t>(i) * dst.shape[1] + dst_off + j] +=
                        src.data[static_cast<size_t>(i) * src.shape[1] + src_off + j];
        }
    }

    static void matmul_raw(const S* a, const S* b, S* c, int m, int k, int n, bool /*acc*/) {
        for (int i = 0; i < m; ++i) {
            S* crow = c + static_cast<size_t>(i) * n;
            std::fill_n(crow, n, S(0));
            for (int p = 0; p < k; ++p) {
                S av = a[static_cast<size_t>(i) * k + p];
                if (av == S(0)) continue;
                const S* brow = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
};

// Central-difference gradient estimate of a scalar function of one tensor.
// The function must be deterministic (dropout off, fixed rng).
template <typename S, typename F>
Tensor<S> finite_difference_grad(F&& f, const Tensor<S>& x, S eps) {
    if (eps <= S(0)) throw std::runtime_error("finite_difference_grad: eps must be positive");
    Tensor<S> g(x.shape);
    Tensor<S> probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        S orig = probe.data[i];
        probe.data[i] = orig + eps;
        S fp = f(probe);
        probe.data[i] = orig - eps;
        S fm = f(probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (S(2) * eps);
    }
    return g;
}

}  // namespace hdlg
