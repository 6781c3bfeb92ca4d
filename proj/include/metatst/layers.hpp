#pragma once

// Building blocks of the encoder with explicit forward/backward passes.
// Every layer keeps its activations in a caller-owned Cache so one layer
// object can serve many samples of a batch.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <fmt/format.h>

#include "metatst/error.hpp"

namespace metatst {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

    Eigen::Index size() const { return value.size(); }
    void zero_grad() { grad.setZero(); }
};

template <class T>
using ParamRefs = std::vector<Param<T>*>;

/// Deterministic uniform in [0, 1) from 53 random bits; independent of the
/// standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double standard_normal(std::mt19937_64& rng) {
    // Box-Muller; u1 kept away from zero.
    const double u1 = 1.0 - unit_uniform(rng);
    const double u2 = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class T>
void fill_normal(Mat<T>& m, double stddev, std::mt19937_64& rng) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * standard_normal(rng));
}

template <class T>
void fill_uniform(Mat<T>& m, double bound, std::mt19937_64& rng) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * bound);
    }
}

enum class Mode { train, eval };

// ---------------------------------------------------------------------------

/// y = x W + b, with W stored in x out.
template <class T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng)
        : weight_(name + ".weight", in, out), bias_(name + ".bias", 1, out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        fill_uniform(weight_.value, bound, rng);
        fill_uniform(bias_.value, bound, rng);
    }

    Mat<T> forward(const Mat<T>& x) const {
        if (x.cols() != weight_.value.rows()) {
            throw ShapeError(fmt::format("{}: input width {} != {}", weight_.name, x.cols(),
                                         weight_.value.rows()));
        }
        Mat<T> y = x * weight_.value;
        y.rowwise() += RowVec<T>(bias_.value.row(0));
        return y;
    }

    /// Accumulates parameter gradients and returns dL/dx.
    Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
        if (weight_.trainable) weight_.grad.noalias() += x.transpose() * dy;
        if (bias_.trainable) bias_.grad += dy.colwise().sum();
        return dy * weight_.value.transpose();
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }
    const Param<T>& weight() const { return weight_; }
    const Param<T>& bias() const { return bias_; }
    Eigen::Index in_features() const { return weight_.value.rows(); }
    Eigen::Index out_features() const { return weight_.value.cols(); }

private:
    Param<T> weight_;
    Param<T> bias_;
};

// ---------------------------------------------------------------------------

template <class T>
class LayerNorm {
public:
    struct Cache {
        Mat<T> xhat;
        Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
    };

    LayerNorm() = default;
    LayerNorm(std::string name, Eigen::Index dim)
        : gamma_(name + ".gamma", 1, dim), beta_(name + ".beta", 1, dim) {
        gamma_.value.setOnes();
    }

    Mat<T> forward(const Mat<T>& x, Cache& c) const {
        const Eigen::Index d = x.cols();
        c.xhat.resize(x.rows(), d);
        c.rstd.resize(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const T mu = x.row(i).mean();
            const T var = (x.row(i).array() - mu).square().mean();
            c.rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kEps));
            c.xhat.row(i) = (x.row(i).array() - mu) * c.rstd(i);
        }
        Mat<T> y = c.xhat.array().rowwise() * RowVec<T>(gamma_.value.row(0)).array();
        y.rowwise() += RowVec<T>(beta_.value.row(0));
        return y;
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& c) {
        if (gamma_.trainable) gamma_.grad += (dy.array() * c.xhat.array()).colwise().sum().matrix();
        if (beta_.trainable) beta_.grad += dy.colwise().sum();
        Mat<T> dxhat = dy.array().rowwise() * RowVec<T>(gamma_.value.row(0)).array();
        Mat<T> dx(dy.rows(), dy.cols());
        for (Eigen::Index i = 0; i < dy.rows(); ++i) {
            const T m1 = dxhat.row(i).mean();
            const T m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
            dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
        }
        return dx;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

private:
    static constexpr double kEps = 1e-5;
    Param<T> gamma_;
    Param<T> beta_;
};

// ---------------------------------------------------------------------------

enum class Activation { gelu, identity };

/// Exact (erf) GELU.
template <class T>
Mat<T> activate(const Mat<T>& x, Activation a) {
    if (a == Activation::identity) return x;
    return x.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); });
}

template <class T>
Mat<T> activate_backward(const Mat<T>& x, const Mat<T>& dy, Activation a) {
    if (a == Activation::identity) return dy;
    const Mat<T> dphi = x.unaryExpr([](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
        return cdf + v * pdf;
    });
    return dy.cwiseProduct(dphi);
}

// ---------------------------------------------------------------------------

/// Inverted dropout. The mask is empty when inactive.
template <class T>
struct Dropout {
    double p = 0.0;

    Mat<T> forward(const Mat<T>& x, Mat<T>& mask, Mode mode, std::mt19937_64& rng) const {
        if (mode == Mode::eval || p <= 0.0) {
            mask.resize(0, 0);
            return x;
        }
        mask.resize(x.rows(), x.cols());
        const T scale = static_cast<T>(1.0 / (1.0 - p));
        for (Eigen::Index i = 0; i < mask.size(); ++i) {
            mask.data()[i] = unit_uniform(rng) < p ? T(0) : scale;
        }
        return x.cwiseProduct(mask);
    }

    static Mat<T> backward(const Mat<T>& dy, const Mat<T>& mask) {
        return mask.size() == 0 ? dy : Mat<T>(dy.cwiseProduct(mask));
    }
};

// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
template <class T>
Mat<T> softmax_rows(const Mat<T>& s) {
    Mat<T> a(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        a.row(i) = (s.row(i).array() - mx).exp();
        a.row(i) /= a.row(i).sum();
    }
    return a;
}

/// dL/dS given A = softmax(S) and dL/dA.
template <class T>
Mat<T> softmax_rows_backward(const Mat<T>& a, const Mat<T>& da) {
    Mat<T> ds(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const T dot = a.row(i).dot(da.row(i));
        ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
    }
    return ds;
}

/// Full (unmasked) multi-head self-attention.
template <class T>
class MultiHeadAttention {
public:
    struct Cache {
        Mat<T> x;
        Mat<T> q, k, v;
        std::vector<Mat<T>> attn;  // per head, K x K
        Mat<T> context;            // K x D, heads concatenated
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, Eigen::Index d_model, int n_heads, std::mt19937_64& rng)
        : heads_(n_heads),
          query_(name + ".query", d_model, d_model, rng),
          key_(name + ".key", d_model, d_model, rng),
          value_(name + ".value", d_model, d_model, rng),
          out_(name + ".out", d_model, d_model, rng) {
        if (n_heads <= 0 || d_model % n_heads != 0) {
            throw ShapeError(fmt::format("{}: d_model {} not divisible by n_heads {}", name, d_model,
                                         n_heads));
        }
    }

    Mat<T> forward(const Mat<T>& x, Cache& c) const {
        c.x = x;
        c.q = query_.forward(x);
        c.k = key_.forward(x);
        c.v = value_.forward(x);
        const Eigen::Index dh = x.cols() / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        c.attn.resize(static_cast<std::size_t>(heads_));
        c.context.resize(x.rows(), x.cols());
        for (int h = 0; h < heads_; ++h) {
            const Eigen::Index off = h * dh;
            Mat<T> scores = c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose() * scale;
            c.attn[static_cast<std::size_t>(h)] = softmax_rows<T>(scores);
            c.context.middleCols(off, dh) = c.attn[static_cast<std::size_t>(h)] * c.v.middleCols(off, dh);
        }
        return out_.forward(c.context);
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& c) {
        const Mat<T> dcontext = out_.backward(c.context, dy);
        const Eigen::Index dh = c.x.cols() / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        Mat<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
        for (int h = 0; h < heads_; ++h) {
            const Eigen::Index off = h * dh;
            const Mat<T>& a = c.attn[static_cast<std::size_t>(h)];
            const Mat<T> dctx = dcontext.middleCols(off, dh);
            const Mat<T> da = dctx * c.v.middleCols(off, dh).transpose();
            dv.middleCols(off, dh) = a.transpose() * dctx;
            const Mat<T> ds = softmax_rows_backward<T>(a, da) * scale;
            dq.middleCols(off, dh) = ds * c.k.middleCols(off, dh);
            dk.middleCols(off, dh) = ds.transpose() * c.q.middleCols(off, dh);
        }
        Mat<T> dx = query_.backward(c.x, dq);
        dx += key_.backward(c.x, dk);
        dx += value_.backward(c.x, dv);
        return dx;
    }

    void collect(ParamRefs<T>& out) {
        query_.collect(out);
        key_.collect(out);
        value_.collect(out);
        out_.collect(out);
    }

    int heads() const { return heads_; }

private:
    int heads_ = 1;
    Linear<T> query_, key_, value_, out_;
};

// ---------------------------------------------------------------------------

/// Post-norm Transformer block:
///   u = LN1(x + drop(attn(x)));  out = LN2(u + drop(W2 drop(gelu(W1 u)))).
template <class T>
class EncoderBlock {
public:
    struct Cache {
        typename MultiHeadAttention<T>::Cache attn;
        Mat<T> attn_mask;
        typename LayerNorm<T>::Cache norm1;
        Mat<T> u;       // LN1 output
        Mat<T> hidden;  // W1 u (pre-activation)
        Mat<T> act_mask;
        Mat<T> act;     // dropout(gelu(hidden))
        Mat<T> ff_mask;
        typename LayerNorm<T>::Cache norm2;
    };

    EncoderBlock() = default;
    EncoderBlock(const std::string& name, Eigen::Index d_model, Eigen::Index d_ff, int n_heads,
                 double dropout, std::mt19937_64& rng)
        : attention_(name + ".attention", d_model, n_heads, rng),
          norm1_(name + ".norm1", d_model),
          ff1_(name + ".ff1", d_model, d_ff, rng),
          ff2_(name + ".ff2", d_ff, d_model, rng),
          norm2_(name + ".norm2", d_model),
          dropout_{dropout} {}

    Mat<T> forward(const Mat<T>& x, Cache& c, Mode mode, std::mt19937_64& rng) const {
        const Mat<T> a = attention_.forward(x, c.attn);
        const Mat<T> res1 = x + dropout_.forward(a, c.attn_mask, mode, rng);
        c.u = norm1_.forward(res1, c.norm1);
        c.hidden = ff1_.forward(c.u);
        c.act = dropout_.forward(activate<T>(c.hidden, Activation::gelu), c.act_mask, mode, rng);
        const Mat<T> f = ff2_.forward(c.act);
        const Mat<T> res2 = c.u + dropout_.forward(f, c.ff_mask, mode, rng);
        return norm2_.forward(res2, c.norm2);
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& c) {
        const Mat<T> dres2 = norm2_.backward(dy, c.norm2);
        const Mat<T> df = Dropout<T>::backward(dres2, c.ff_mask);
        const Mat<T> dact = Dropout<T>::backward(ff2_.backward(c.act, df), c.act_mask);
        const Mat<T> dhidden = activate_backward<T>(c.hidden, dact, Activation::gelu);
        const Mat<T> du = dres2 + ff1_.backward(c.u, dhidden);
        const Mat<T> dres1 = norm1_.backward(du, c.norm1);
        const Mat<T> da = Dropout<T>::backward(dres1, c.attn_mask);
        return dres1 + attention_.backward(da, c.attn);
    }

    void collect(ParamRefs<T>& out) {
        attention_.collect(out);
        norm1_.collect(out);
        ff1_.collect(out);
        ff2_.collect(out);
        norm2_.collect(out);
    }

private:
    MultiHeadAttention<T> attention_;
    LayerNorm<T> norm1_;
    Linear<T> ff1_, ff2_;
    LayerNorm<T> norm2_;
    Dropout<T> dropout_;
};

// ---------------------------------------------------------------------------

/// Two linear maps E -> D -> D with an activation in between. Maps the text
/// encoder's native space onto model tokens.
template <class T>
class ModalAlign {
public:
    struct Cache {
        Mat<T> x;
        Mat<T> hidden;
        Mat<T> act;
    };

    ModalAlign() = default;
    ModalAlign(Eigen::Index native_dim, Eigen::Index d_model, Activation activation, std::mt19937_64& rng)
        : first_("align.first", native_dim, d_model, rng),
          second_("align.second", d_model, d_model, rng),
          activation_(activation) {}

    Mat<T> forward(const Mat<T>& x, Cache& c) const {
        c.x = x;
        c.hidden = first_.forward(x);
        c.act = activate<T>(c.hidden, activation_);
        return second_.forward(c.act);
    }

    Mat<T> forward(const Mat<T>& x) const {
        Cache c;
        return forward(x, c);
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& c) {
        const Mat<T> dact = second_.backward(c.act, dy);
        return first_.backward(c.x, activate_backward<T>(c.hidden, dact, activation_));
    }

    void collect(ParamRefs<T>& out) {
        first_.collect(out);
        second_.collect(out);
    }

    Linear<T>& first() { return first_; }
    Linear<T>& second() { return second_; }
    Activation activation() const { return activation_; }

private:
    Linear<T> first_, second_;
    Activation activation_ = Activation::gelu;
};

// ---------------------------------------------------------------------------

/// Router aggregation: R learned query tokens attend over the word tokens in
/// one multi-head cross-attention pass; the R outputs are averaged. Values are
/// the word tokens themselves, so every output is a convex combination of words.
template <class T>
class RouterAggregator {
public:
    struct Cache {
        Mat<T> words;
        Mat<T> q, k;
        std::vector<Mat<T>> attn;  // per head, R x W
    };

    RouterAggregator() = default;
    RouterAggregator(Eigen::Index native_dim, int router_count, int n_heads, std::mt19937_64& rng)
        : routers_("router.tokens", router_count, native_dim),
          query_("router.query", native_dim, native_dim, rng),
          key_("router.key", native_dim, native_dim, rng),
          heads_(n_heads) {
        if (router_count <= 0) throw ShapeError("router count must be positive");
        if (n_heads <= 0 || native_dim % n_heads != 0) {
            throw ShapeError(fmt::format("router: native dim {} not divisible by n_heads {}",
                                         native_dim, n_heads));
        }
        fill_normal(routers_.value, 0.02, rng);
        initialized_ = true;
    }

    bool initialized() const { return initialized_; }
    Eigen::Index router_count() const { return routers_.value.rows(); }

    /// words: W x E. Returns 1 x E.
    Mat<T> forward(const Mat<T>& words, Cache& c) const {
        if (!initialized_) throw Error("router aggregation used before its parameters were initialized");
        if (words.rows() == 0 || words.cols() != routers_.value.cols()) {
            throw ShapeError("router: word tokens have the wrong shape");
        }
        c.words = words;
        c.q = query_.forward(routers_.value);
        c.k = key_.forward(words);
        const Eigen::Index e = words.cols();
        const Eigen::Index dh = e / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        const Eigen::Index r = routers_.value.rows();
        Mat<T> out = Mat<T>::Zero(1, e);
        c.attn.resize(static_cast<std::size_t>(heads_));
        for (int h = 0; h < heads_; ++h) {
            const Eigen::Index off = h * dh;
            auto& a = c.attn[static_cast<std::size_t>(h)];
            a = softmax_rows<T>(c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose() * scale);
            // mean over routers of A V equals (column-mean of A) V
            out.middleCols(off, dh) = (a.colwise().sum() / static_cast<T>(r)) * words.middleCols(off, dh);
        }
        return out;
    }

    Mat<T> forward(const Mat<T>& words) const {
        Cache c;
        return forward(words, c);
    }

    /// Returns dL/dwords.
    Mat<T> backward(const Mat<T>& dy, const Cache& c) {
        const Eigen::Index e = c.words.cols();
        const Eigen::Index dh = e / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        const Eigen::Index r = routers_.value.rows();
        Mat<T> dwords = Mat<T>::Zero(c.words.rows(), e);
        Mat<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols());
        for (int h = 0; h < heads_; ++h) {
            const Eigen::Index off = h * dh;
            const Mat<T>& a = c.attn[static_cast<std::size_t>(h)];
            const RowVec<T> dout = dy.middleCols(off, dh);
            // out_h = (1/R) 1^T A V_h
            dwords.middleCols(off, dh) += (a.colwise().sum().transpose() / static_cast<T>(r)) * dout;
            const Mat<T> da = Mat<T>::Ones(r, 1) * (c.words.middleCols(off, dh) * dout.transpose()).transpose() /
                              static_cast<T>(r);
            const Mat<T> ds = softmax_rows_backward<T>(a, da) * scale;
            dq.middleCols(off, dh) = ds * c.k.middleCols(off, dh);
            dk.middleCols(off, dh) = ds.transpose() * c.q.middleCols(off, dh);
        }
        const Mat<T> drouters = query_.backward(routers_.value, dq);
        if (routers_.trainable) routers_.grad += drouters;
        dwords += key_.backward(c.words, dk);
        return dwords;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&routers_);
        query_.collect(out);
        key_.collect(out);
    }

private:
    Param<T> routers_;
    Linear<T> query_, key_;
    int heads_ = 1;
    bool initialized_ = false;
};

}  // namespace metatst
