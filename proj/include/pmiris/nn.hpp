#pragma once

// Minimal trainable CNN stack: conv / relu / maxpool / dropout / dense layers,
// a sequential net with per-call workspaces (no shared mutable state between
// concurrent forward/backward calls), softmax cross-entropy, and SGD with
// momentum. Layers hold parameters only; activations and gradients live in
// the caller-owned Workspace / GradStore.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pmiris/common.hpp"
#include "pmiris/tensor.hpp"

namespace pmiris {

enum class ReluBackwardMode { Standard, Guided };

struct PassFlags {
    bool training = false;
    ReluBackwardMode relu_mode = ReluBackwardMode::Standard;
    Rng* dropout_rng = nullptr;  // required when training and dropout rate > 0
};

template <typename T>
struct LayerCache {
    Tensor<T> col;                  // conv: im2col buffer kept for backward
    std::vector<std::int32_t> idx;  // maxpool: argmax source offsets
    std::vector<T> mask;            // dropout: inverted-dropout scale mask
};

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
struct GradStore {
    std::map<std::string, Tensor<T>> grads;

    Tensor<T>& at(const std::string& name, const std::vector<int>& shape) {
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Tensor<T>(shape)).first;
        return it->second;
    }
    void zero() {
        for (auto& [k, g] : grads) g.zero();
    }
};

template <typename T>
class Layer {
  public:
    explicit Layer(std::string name) : name_(std::move(name)) {}
    virtual ~Layer() = default;

    const std::string& name() const { return name_; }
    virtual const char* kind() const = 0;
    virtual std::vector<int> out_shape(const std::vector<int>& in) const = 0;
    virtual void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& c,
                         const PassFlags& f) const = 0;
    // gx == nullptr skips the input-gradient computation.
    virtual void backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx,
                          const LayerCache<T>& c, GradStore<T>* gs, const PassFlags& f) const = 0;
    virtual void collect_params(std::vector<ParamRef<T>>& out) {}

  private:
    std::string name_;
};

// ---------------------------------------------------------------------------
// Conv2d: stride 1, square kernel, zero padding k/2 (shape-preserving).
// ---------------------------------------------------------------------------

namespace nn_detail {

template <typename T>
void im2col(const Tensor<T>& x, int k, int pad, Tensor<T>& col) {
    const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
    col.shape = {ch * k * k, h * w};
    col.v.assign(col.count(), T(0));
    T* out = col.data();
    for (int c = 0; c < ch; ++c) {
        const T* plane = x.data() + std::size_t(c) * h * w;
        for (int kr = 0; kr < k; ++kr) {
            for (int kc = 0; kc < k; ++kc) {
                T* dst = out + (std::size_t(c) * k * k + std::size_t(kr) * k + kc) * (std::size_t(h) * w);
                for (int r = 0; r < h; ++r) {
                    const int sr = r + kr - pad;
                    if (sr < 0 || sr >= h) continue;
                    const int c_lo = std::max(0, pad - kc);
                    const int c_hi = std::min(w, w + pad - kc);
                    const T* src = plane + std::size_t(sr) * w + (c_lo + kc - pad);
                    std::copy(src, src + (c_hi - c_lo), dst + std::size_t(r) * w + c_lo);
                }
            }
        }
    }
}

template <typename T>
void col2im(const Tensor<T>& col, int ch, int h, int w, int k, int pad, Tensor<T>& x) {
    x.shape = {ch, h, w};
    x.v.assign(x.count(), T(0));
    const T* in = col.data();
    for (int c = 0; c < ch; ++c) {
        T* plane = x.data() + std::size_t(c) * h * w;
        for (int kr = 0; kr < k; ++kr) {
            for (int kc = 0; kc < k; ++kc) {
                const T* src_base =
                    in + (std::size_t(c) * k * k + std::size_t(kr) * k + kc) * (std::size_t(h) * w);
                for (int r = 0; r < h; ++r) {
                    const int sr = r + kr - pad;
                    if (sr < 0 || sr >= h) continue;
                    const int c_lo = std::max(0, pad - kc);
                    const int c_hi = std::min(w, w + pad - kc);
                    T* dst = plane + std::size_t(sr) * w + (c_lo + kc - pad);
                    const T* src = src_base + std::size_t(r) * w + c_lo;
                    for (int i = 0; i < c_hi - c_lo; ++i) dst[i] += src[i];
                }
            }
        }
    }
}

}  // namespace nn_detail

template <typename T>
class Conv2d final : public Layer<T> {
  public:
    Conv2d(std::string name, int in_ch, int out_ch, int k = 3)
        : Layer<T>(std::move(name)),
          in_ch_(in_ch),
          out_ch_(out_ch),
          k_(k),
          pad_(k / 2),
          w_({out_ch, in_ch * k * k}),
          b_({out_ch}) {}

    const char* kind() const override { return "conv"; }
    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }
    int kernel() const { return k_; }
    Tensor<T>& weights() { return w_; }
    Tensor<T>& bias() { return b_; }

    std::vector<int> out_shape(const std::vector<int>& in) const override {
        return {out_ch_, in[1], in[2]};
    }

    void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& c, const PassFlags&) const override {
        require(x.shape.size() == 3 && x.dim(0) == in_ch_, ErrKind::Internal,
                this->name() + ": bad input shape " + shape_string(x));
        const int h = x.dim(1), w = x.dim(2), hw = h * w;
        nn_detail::im2col(x, k_, pad_, c.col);
        y.shape = {out_ch_, h, w};
        y.v.resize(y.count());
        gemm(false, false, out_ch_, hw, in_ch_ * k_ * k_, T(1), w_.data(), in_ch_ * k_ * k_,
             c.col.data(), hw, T(0), y.data(), hw);
        for (int oc = 0; oc < out_ch_; ++oc) {
            T* row = y.data() + std::size_t(oc) * hw;
            const T bias = b_.v[std::size_t(oc)];
            for (int i = 0; i < hw; ++i) row[i] += bias;
        }
    }

    void backward(const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& gy, Tensor<T>* gx,
                  const LayerCache<T>& c, GradStore<T>* gs, const PassFlags&) const override {
        const int h = x.dim(1), w = x.dim(2), hw = h * w;
        const int kk = in_ch_ * k_ * k_;
        if (gs) {
            Tensor<T>& gw = gs->at(this->name() + ".w", w_.shape);
            Tensor<T>& gb = gs->at(this->name() + ".b", b_.shape);
            gemm(false, true, out_ch_, kk, hw, T(1), gy.data(), hw, c.col.data(), hw, T(1), gw.data(),
                 kk);
            for (int oc = 0; oc < out_ch_; ++oc) {
                const T* row = gy.data() + std::size_t(oc) * hw;
                T acc = T(0);
                for (int i = 0; i < hw; ++i) acc += row[i];
                gb.v[std::size_t(oc)] += acc;
            }
        }
        if (gx) {
            Tensor<T> dcol({kk, hw});
            gemm(true, false, kk, hw, out_ch_, T(1), w_.data(), kk, gy.data(), hw, T(0), dcol.data(),
                 hw);
            nn_detail::col2im(dcol, in_ch_, h, w, k_, pad_, *gx);
        }
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({this->name() + ".w", &w_});
        out.push_back({this->name() + ".b", &b_});
    }

  private:
    int in_ch_, out_ch_, k_, pad_;
    Tensor<T> w_;  // [out_ch, in_ch*k*k]
    Tensor<T> b_;  // [out_ch]
};

// ---------------------------------------------------------------------------
// ReLU. Guided backward additionally zeroes negative incoming gradients.
// ---------------------------------------------------------------------------

template <typename T>
class Relu final : public Layer<T> {
  public:
    using Layer<T>::Layer;
    const char* kind() const override { return "relu"; }
    std::vector<int> out_shape(const std::vector<int>& in) const override { return in; }

    void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, const PassFlags&) const override {
        y.shape = x.shape;
        y.v.resize(x.v.size());
        for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] > T(0) ? x.v[i] : T(0);
    }

    void backward(const Tensor<T>&, const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx,
                  const LayerCache<T>&, GradStore<T>*, const PassFlags& f) const override {
        if (!gx) return;
        gx->shape = y.shape;
        gx->v.resize(y.v.size());
        if (f.relu_mode == ReluBackwardMode::Guided) {
            for (std::size_t i = 0; i < y.v.size(); ++i)
                gx->v[i] = (y.v[i] > T(0) && gy.v[i] > T(0)) ? gy.v[i] : T(0);
        } else {
            for (std::size_t i = 0; i < y.v.size(); ++i)
                gx->v[i] = y.v[i] > T(0) ? gy.v[i] : T(0);
        }
    }
};

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Input spatial dims must be even.
// ---------------------------------------------------------------------------

template <typename T>
class MaxPool2 final : public Layer<T> {
  public:
    using Layer<T>::Layer;
    const char* kind() const override { return "pool"; }

    std::vector<int> out_shape(const std::vector<int>& in) const override {
        return {in[0], in[1] / 2, in[2] / 2};
    }

    void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& c, const PassFlags&) const override {
        const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
        require(h % 2 == 0 && w % 2 == 0, ErrKind::Internal,
                this->name() + ": odd spatial size " + shape_string(x));
        const int oh = h / 2, ow = w / 2;
        y.shape = {ch, oh, ow};
        y.v.resize(y.count());
        c.idx.resize(y.count());
        for (int cc = 0; cc < ch; ++cc) {
            const T* plane = x.data() + std::size_t(cc) * h * w;
            T* out = y.data() + std::size_t(cc) * oh * ow;
            std::int32_t* idx = c.idx.data() + std::size_t(cc) * oh * ow;
            for (int r = 0; r < oh; ++r) {
                for (int q = 0; q < ow; ++q) {
                    const int base = (2 * r) * w + 2 * q;
                    int best = base;
                    T bv = plane[base];
                    const int cands[3] = {base + 1, base + w, base + w + 1};
                    for (int cand : cands)
                        if (plane[cand] > bv) {
                            bv = plane[cand];
                            best = cand;
                        }
                    out[std::size_t(r) * ow + q] = bv;
                    idx[std::size_t(r) * ow + q] = best;
                }
            }
        }
    }

    void backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx,
                  const LayerCache<T>& c, GradStore<T>*, const PassFlags&) const override {
        if (!gx) return;
        gx->shape = x.shape;
        gx->v.assign(x.v.size(), T(0));
        const int ch = y.dim(0), oh = y.dim(1), ow = y.dim(2);
        const std::size_t plane_in = std::size_t(x.dim(1)) * x.dim(2);
        for (int cc = 0; cc < ch; ++cc) {
            const T* g = gy.data() + std::size_t(cc) * oh * ow;
            const std::int32_t* idx = c.idx.data() + std::size_t(cc) * oh * ow;
            T* out = gx->data() + std::size_t(cc) * plane_in;
            for (int i = 0; i < oh * ow; ++i) out[idx[i]] += g[i];
        }
    }
};

// ---------------------------------------------------------------------------
// Inverted dropout; identity in evaluation mode.
// ---------------------------------------------------------------------------

template <typename T>
class Dropout final : public Layer<T> {
  public:
    Dropout(std::string name, double rate) : Layer<T>(std::move(name)), rate_(rate) {
        require(rate >= 0.0 && rate < 1.0, ErrKind::Config, "dropout rate must be in [0,1)");
    }
    const char* kind() const override { return "dropout"; }
    std::vector<int> out_shape(const std::vector<int>& in) const override { return in; }

    void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& c, const PassFlags& f) const override {
        y.shape = x.shape;
        y.v.resize(x.v.size());
        if (!f.training || rate_ == 0.0) {
            y.v = x.v;
            return;
        }
        require(f.dropout_rng != nullptr, ErrKind::Internal,
                this->name() + ": training pass without a dropout rng");
        c.mask.resize(x.v.size());
        const T scale = T(1.0 / (1.0 - rate_));
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            const bool keep = f.dropout_rng->uniform01() >= rate_;
            c.mask[i] = keep ? scale : T(0);
            y.v[i] = x.v[i] * c.mask[i];
        }
    }

    void backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>& gy, Tensor<T>* gx,
                  const LayerCache<T>& c, GradStore<T>*, const PassFlags& f) const override {
        if (!gx) return;
        gx->shape = gy.shape;
        gx->v.resize(gy.v.size());
        if (!f.training || rate_ == 0.0 || c.mask.empty()) {
            gx->v = gy.v;
            return;
        }
        for (std::size_t i = 0; i < gy.v.size(); ++i) gx->v[i] = gy.v[i] * c.mask[i];
    }

  private:
    double rate_;
};

// ---------------------------------------------------------------------------
// Dense (fully connected); flattens its input implicitly.
// ---------------------------------------------------------------------------

template <typename T>
class Dense final : public Layer<T> {
  public:
    Dense(std::string name, int in_dim, int out_dim)
        : Layer<T>(std::move(name)), in_(in_dim), out_(out_dim), w_({out_dim, in_dim}), b_({out_dim}) {}

    const char* kind() const override { return "dense"; }
    int in_dim() const { return in_; }
    int out_dim() const { return out_; }
    Tensor<T>& weights() { return w_; }
    Tensor<T>& bias() { return b_; }

    std::vector<int> out_shape(const std::vector<int>&) const override { return {out_}; }

    void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, const PassFlags&) const override {
        require(int(x.count()) == in_, ErrKind::Internal,
                this->name() + ": expected " + std::to_string(in_) + " inputs, got " + shape_string(x));
        y.shape = {out_};
        y.v.assign(std::size_t(out_), T(0));
        gemm(false, false, out_, 1, in_, T(1), w_.data(), in_, x.data(), 1, T(0), y.data(), 1);
        for (int i = 0; i < out_; ++i) y.v[std::size_t(i)] += b_.v[std::size_t(i)];
    }

    void backward(const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& gy, Tensor<T>* gx,
                  const LayerCache<T>&, GradStore<T>* gs, const PassFlags&) const override {
        if (gs) {
            Tensor<T>& gw = gs->at(this->name() + ".w", w_.shape);
            Tensor<T>& gb = gs->at(this->name() + ".b", b_.shape);
            // outer product gy (out x 1) * x^T (1 x in)
            gemm(false, false, out_, in_, 1, T(1), gy.data(), 1, x.data(), in_, T(1), gw.data(), in_);
            for (int i = 0; i < out_; ++i) gb.v[std::size_t(i)] += gy.v[std::size_t(i)];
        }
        if (gx) {
            gx->shape = x.shape;
            gx->v.assign(x.v.size(), T(0));
            gemm(true, false, in_, 1, out_, T(1), w_.data(), in_, gy.data(), 1, T(0), gx->data(), 1);
        }
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({this->name() + ".w", &w_});
        out.push_back({this->name() + ".b", &b_});
    }

  private:
    int in_, out_;
    Tensor<T> w_;  // [out, in]
    Tensor<T> b_;
};

// ---------------------------------------------------------------------------
// Sequential network with caller-owned workspaces.
// ---------------------------------------------------------------------------

template <typename T>
struct Workspace {
    Tensor<T> input;
    std::vector<Tensor<T>> outs;
    std::vector<LayerCache<T>> caches;
    PassFlags flags;
};

template <typename T>
class Net {
  public:
    std::vector<std::unique_ptr<Layer<T>>> layers;

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i]->name() == name) return int(i);
        return -1;
    }

    const Tensor<T>& forward(const Tensor<T>& input, Workspace<T>& ws) const {
        ws.input = input;
        ws.outs.resize(layers.size());
        ws.caches.resize(layers.size());
        const Tensor<T>* x = &ws.input;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i]->forward(*x, ws.outs[i], ws.caches[i], ws.flags);
            x = &ws.outs[i];
        }
        return ws.outs.back();
    }

    // Runs layers (after_layer, end) on `act` as if it were the output of
    // layers[after_layer]; evaluation-mode scratch pass used by the
    // finite-difference checks. Does not touch `ws`-style state.
    Tensor<T> forward_from(int after_layer, const Tensor<T>& act) const {
        Tensor<T> x = act;
        PassFlags eval_flags;
        LayerCache<T> scratch;
        Tensor<T> y;
        for (std::size_t i = std::size_t(after_layer + 1); i < layers.size(); ++i) {
            layers[i]->forward(x, y, scratch, eval_flags);
            x = std::move(y);
        }
        return x;
    }

    // Back-propagates dlogits. Parameter gradients accumulate into gs (when
    // non-null). If stop_layer >= 0 the walk stops once the gradient w.r.t.
    // layers[stop_layer]'s output is known and returns it; with stop_layer
    // == -1 it returns the gradient w.r.t. the network input (empty when
    // want_input_grad is false).
    Tensor<T> backward(const Tensor<T>& dlogits, Workspace<T>& ws, GradStore<T>* gs,
                       int stop_layer = -1, bool want_input_grad = true) const {
        require(ws.outs.size() == layers.size() && !ws.outs.empty(), ErrKind::Internal,
                "backward called before forward");
        Tensor<T> g = dlogits;
        Tensor<T> gx;
        for (int i = int(layers.size()) - 1; i >= 0; --i) {
            if (i == stop_layer) return g;
            const Tensor<T>& x = (i == 0) ? ws.input : ws.outs[std::size_t(i - 1)];
            const bool want_gx = i > 0 || want_input_grad;
            layers[std::size_t(i)]->backward(x, ws.outs[std::size_t(i)], g, want_gx ? &gx : nullptr,
                                             ws.caches[std::size_t(i)], gs, ws.flags);
            g = std::move(gx);
            gx = Tensor<T>();
        }
        return g;  // gradient w.r.t. the network input
    }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        for (auto& l : layers) l->collect_params(out);
        return out;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (auto& p : params()) n += p.tensor->count();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Softmax + cross-entropy.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> softmax(const Tensor<T>& logits) {
    T mx = logits.v[0];
    for (T v : logits.v) mx = std::max(mx, v);
    std::vector<T> p(logits.v.size());
    T sum = T(0);
    for (std::size_t i = 0; i < logits.v.size(); ++i) {
        p[i] = std::exp(logits.v[i] - mx);
        sum += p[i];
    }
    for (T& v : p) v /= sum;
    return p;
}

template <typename T>
T cross_entropy(const std::vector<T>& probs, int label) {
    const T p = std::max(probs[std::size_t(label)], T(1e-12));
    return -std::log(p);
}

template <typename T>
Tensor<T> cross_entropy_grad(const std::vector<T>& probs, int label) {
    Tensor<T> g({int(probs.size())});
    for (std::size_t i = 0; i < probs.size(); ++i) g.v[i] = probs[i];
    g.v[std::size_t(label)] -= T(1);
    return g;
}

// ---------------------------------------------------------------------------
// SGD with momentum: v = m*v + g, w -= lr*v.
// ---------------------------------------------------------------------------

template <typename T>
class SgdMomentum {
  public:
    SgdMomentum(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

    void step(std::vector<ParamRef<T>>& params, GradStore<T>& gs, T grad_scale) {
        for (auto& p : params) {
            auto git = gs.grads.find(p.name);
            if (git == gs.grads.end()) continue;
            Tensor<T>& g = git->second;
            auto vit = vel_.find(p.name);
            if (vit == vel_.end()) vit = vel_.emplace(p.name, Tensor<T>(p.tensor->shape)).first;
            Tensor<T>& v = vit->second;
            T* wv = p.tensor->data();
            T* vv = v.data();
            const T* gv = g.data();
            const std::size_t n = p.tensor->count();
            for (std::size_t i = 0; i < n; ++i) {
                vv[i] = momentum_ * vv[i] + gv[i] * grad_scale;
                wv[i] -= lr_ * vv[i];
            }
        }
    }

  private:
    T lr_, momentum_;
    std::map<std::string, Tensor<T>> vel_;
};

}  // namespace pmiris
