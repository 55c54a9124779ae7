#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hdlg/corpus.hpp"
#include "hdlg/rng.hpp"
#include "hdlg/tape.hpp"
#include "hdlg/tokenizer.hpp"

namespace hdlg::test {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

// max relative error between the tape gradient and central differences for a
// scalar-valued function of one input tensor
template <typename MakeLoss>
double gradcheck(const Tensor<double>& x, MakeLoss make_loss, double eps = 1e-5) {
    Tape<double> t;
    Var xv = t.leaf(x, true);
    Var loss = make_loss(t, xv);
    t.run_backward(loss);
    Tensor<double> analytic = t.grad_of(xv);
    auto f = [&](const Tensor<double>& probe) {
        Tape<double> tt;
        Var pv = tt.leaf(probe, false);
        return tt.val(make_loss(tt, pv)).item();
    };
    Tensor<double> fd = finite_difference_grad<double>(f, x, eps);
    double worst = 0;
    for (size_t i = 0; i < fd.data.size(); ++i) {
        double a = analytic.data[i], g = fd.data[i];
        double denom = std::max({std::abs(a), std::abs(g), 1e-4});
        worst = std::max(worst, std::abs(a - g) / denom);
    }
    return worst;
}

// random parameter-group gradient check against central differences on a
// full-model loss: loss_fn must rebuild the forward pass from the store
template <typename S>
double gradcheck_param(const ParameterStore<S>& store, const std::string& name,
                       const std::function<S(const ParameterStore<S>&)>& loss_fn,
                       const Tensor<S>& analytic_grad, int n_coords, Rng& rng, S eps) {
    ParameterStore<S> probe = store;
    Tensor<S>& tensor = probe.get(name);
    double worst = 0;
    for (int c = 0; c < n_coords; ++c) {
        size_t i = static_cast<size_t>(rng.uniform_int(static_cast<int>(tensor.data.size())));
        S orig = tensor.data[i];
        tensor.data[i] = orig + eps;
        S fp = loss_fn(probe);
        tensor.data[i] = orig - eps;
        S fm = loss_fn(probe);
        tensor.data[i] = orig;
        double fd = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * eps);
        double a = analytic_grad.data[i];
        double denom = std::max({std::abs(a), std::abs(fd), 1e-4});
        worst = std::max(worst, std::abs(a - fd) / denom);
    }
    return worst;
}

// short synthetic utterances for hand-built contexts
inline TokenSeq seq_of(const std::vector<int>& body, int max_len) {
    TokenSeq s;
    s.ids.assign(max_len, kPadId);
    s.attention.assign(max_len, 0);
    s.ids[0] = kClsId;
    for (size_t i = 0; i < body.size(); ++i) s.ids[i + 1] = body[i];
    s.ids[body.size() + 1] = kSepId;
    for (size_t i = 0; i <= body.size() + 1; ++i) s.attention[i] = 1;
    return s;
}

inline Utterance utt(const std::string& text, long long start, long long end, int label = -1) {
    Utterance u;
    u.text = text;
    u.start_ms = start;
    u.end_ms = end;
    if (label >= 0) u.label = label;
    return u;
}

}  // namespace hdlg::test
