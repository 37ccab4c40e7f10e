#ifndef MODALFLOW_AUTODIFF_HPP
#define MODALFLOW_AUTODIFF_HPP

// Reverse-mode autodiff over Eigen matrices. A Tape owns the forward values
// and a backward closure per node; graphs are rebuilt every step, so node ids
// are only valid for the tape that produced them. Templated on the scalar so
// gradient checks can run the whole stack in double.

#include "modalflow/common.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace modalflow {

template <class S>
class Tape {
public:
    using M = MatT<S>;
    using Ref = int;

    Ref param(M v) { return alloc(std::move(v), true); }
    Ref constant(M v) { return alloc(std::move(v), false); }

    const M& val(Ref r) const { return node(r).val; }
    bool needs_grad(Ref r) const { return node(r).needs; }
    int size() const { return int(nodes_.size()); }

    // Zero-initialized on first touch; empty until then so backward can skip
    // branches no gradient reached.
    M& grad(Ref r) {
        Node& n = node(r);
        if (n.grad.size() == 0) n.grad = M::Zero(n.val.rows(), n.val.cols());
        return n.grad;
    }
    bool grad_touched(Ref r) const { return node(r).grad.size() != 0; }

    void backward(Ref loss) {
        if (val(loss).size() != 1) throw ValidationError("backward: loss must be a scalar node");
        grad(loss)(0, 0) += S(1);
        for (int i = loss; i >= 0; i--) {
            Node& n = nodes_[size_t(i)];
            if (n.back && n.needs && n.grad.size() != 0) n.back(*this);
        }
    }

    // ---- arithmetic --------------------------------------------------------

    Ref add(Ref a, Ref b) {
        check_same_shape(a, b, "add");
        Ref out = alloc(val(a) + val(b), needs_grad(a) || needs_grad(b));
        node(out).back = [a, b, out](Tape& t) {
            const M& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g;
            if (t.needs_grad(b)) t.grad(b) += g;
        };
        return out;
    }

    Ref mul(Ref a, Ref b) {
        check_same_shape(a, b, "mul");
        Ref out = alloc(val(a).cwiseProduct(val(b)), needs_grad(a) || needs_grad(b));
        node(out).back = [a, b, out](Tape& t) {
            const M& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(t.val(b));
            if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(t.val(a));
        };
        return out;
    }

    Ref scale(Ref a, S c) {
        Ref out = alloc(val(a) * c, needs_grad(a));
        node(out).back = [a, c, out](Tape& t) {
            if (t.needs_grad(a)) t.grad(a) += t.node(out).grad * c;
        };
        return out;
    }

    Ref add_scalar(Ref a, S c) {
        Ref out = alloc((val(a).array() + c).matrix(), needs_grad(a));
        node(out).back = [a, out](Tape& t) {
            if (t.needs_grad(a)) t.grad(a) += t.node(out).grad;
        };
        return out;
    }

    Ref matmul(Ref a, Ref b) {
        if (val(a).cols() != val(b).rows()) throw ValidationError("matmul: inner dims differ");
        Ref out = alloc(val(a) * val(b), needs_grad(a) || needs_grad(b));
        node(out).back = [a, b, out](Tape& t) {
            const M& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a).noalias() += g * t.val(b).transpose();
            if (t.needs_grad(b)) t.grad(b).noalias() += t.val(a).transpose() * g;
        };
        return out;
    }

    // rows of a, plus a 1 x C bias row
    Ref add_rowvec(Ref a, Ref bias) {
        if (val(bias).rows() != 1 || val(bias).cols() != val(a).cols())
            throw ValidationError("add_rowvec: bias must be 1 x cols(a)");
        Ref out = alloc(val(a).rowwise() + val(bias).row(0), needs_grad(a) || needs_grad(bias));
        node(out).back = [a, bias, out](Tape& t) {
            const M& g = t.node(out).grad;
            if (t.needs_grad(a)) t.grad(a) += g;
            if (t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
        };
        return out;
    }

    Ref linear(Ref x, Ref w, Ref b) { return add_rowvec(matmul(x, w), b); }

    // Repeat each row of a (B x K) `group` times -> (B*group) x K. Used to
    // broadcast per-sample conditioning over that sample's tokens.
    Ref expand_groups(Ref a, int group) {
        if (group < 1) throw ValidationError("expand_groups: group must be >= 1");
        const M& A = val(a);
        M out(A.rows() * group, A.cols());
        for (Eigen::Index r = 0; r < A.rows(); r++)
            out.middleRows(r * group, group).rowwise() = A.row(r);
        Ref o = alloc(std::move(out), needs_grad(a));
        node(o).back = [a, group, o](Tape& t) {
            if (!t.needs_grad(a)) return;
            const M& g = t.node(o).grad;
            M& ga = t.grad(a);
            for (Eigen::Index r = 0; r < ga.rows(); r++)
                ga.row(r) += g.middleRows(r * group, group).colwise().sum();
        };
        return o;
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        if (parts.empty()) throw ValidationError("concat_cols: no parts");
        Eigen::Index rows = val(parts[0]).rows(), cols = 0;
        bool needs = false;
        for (Ref p : parts) {
            if (val(p).rows() != rows) throw ValidationError("concat_cols: row counts differ");
            cols += val(p).cols();
            needs = needs || needs_grad(p);
        }
        M out(rows, cols);
        Eigen::Index off = 0;
        for (Ref p : parts) {
            out.middleCols(off, val(p).cols()) = val(p);
            off += val(p).cols();
        }
        Ref o = alloc(std::move(out), needs);
        node(o).back = [parts, o](Tape& t) {
            const M& g = t.node(o).grad;
            Eigen::Index off2 = 0;
            for (Ref p : parts) {
                Eigen::Index c = t.val(p).cols();
                if (t.needs_grad(p)) t.grad(p) += g.middleCols(off2, c);
                off2 += c;
            }
        };
        return o;
    }

    Ref slice_cols(Ref a, int begin, int count) {
        if (begin < 0 || count < 1 || begin + count > val(a).cols())
            throw ValidationError("slice_cols: range out of bounds");
        Ref out = alloc(val(a).middleCols(begin, count), needs_grad(a));
        node(out).back = [a, begin, count, out](Tape& t) {
            if (t.needs_grad(a)) t.grad(a).middleCols(begin, count) += t.node(out).grad;
        };
        return out;
    }

    // Gather rows of an embedding table by index; backward scatter-adds.
    Ref embedding_rows(Ref table, std::vector<int> idx) {
        const M& E = val(table);
        for (int i : idx)
            if (i < 0 || i >= E.rows()) throw ValidationError("embedding_rows: index out of range");
        M out(Eigen::Index(idx.size()), E.cols());
        for (size_t r = 0; r < idx.size(); r++) out.row(Eigen::Index(r)) = E.row(idx[r]);
        Ref o = alloc(std::move(out), needs_grad(table));
        node(o).back = [table, idx = std::move(idx), o](Tape& t) {
            if (!t.needs_grad(table)) return;
            const M& g = t.node(o).grad;
            M& ge = t.grad(table);
            for (size_t r = 0; r < idx.size(); r++) ge.row(idx[r]) += g.row(Eigen::Index(r));
        };
        return o;
    }

    // ---- nonlinearities ----------------------------------------------------

    Ref silu(Ref a) {
        const M& x = val(a);
        M sig = (S(1) / (S(1) + (-x.array()).exp())).matrix();
        Ref out = alloc(x.cwiseProduct(sig), needs_grad(a));
        node(out).back = [a, out, sig = std::move(sig)](Tape& t) {
            if (!t.needs_grad(a)) return;
            const M& x2 = t.val(a);
            // d/dx x*sig(x) = sig(x) (1 + x (1 - sig(x)))
            M d = sig.array() * (S(1) + x2.array() * (S(1) - sig.array()));
            t.grad(a) += t.node(out).grad.cwiseProduct(d);
        };
        return out;
    }

    Ref gelu(Ref a) {
        constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        const M& x = val(a);
        M inner = (S(kC) * (x.array() + S(0.044715) * x.array().cube())).matrix();
        M th = inner.array().tanh().matrix();
        Ref out = alloc((S(0.5) * x.array() * (S(1) + th.array())).matrix(), needs_grad(a));
        node(out).back = [a, out, th = std::move(th)](Tape& t) {
            if (!t.needs_grad(a)) return;
            const M& x2 = t.val(a);
            auto sech2 = (S(1) - th.array().square());
            auto dinner = S(kC) * (S(1) + S(3) * S(0.044715) * x2.array().square());
            M d = (S(0.5) * (S(1) + th.array()) + S(0.5) * x2.array() * sech2 * dinner).matrix();
            t.grad(a) += t.node(out).grad.cwiseProduct(d);
        };
        return out;
    }

    // Per-row layer norm without affine parameters; modulation supplies the
    // affine part separately.
    Ref layernorm(Ref a, S eps = S(1e-6)) {
        const M& x = val(a);
        auto inv_std = std::make_shared<std::vector<S>>(size_t(x.rows()));
        M out(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); r++) {
            S mean = x.row(r).mean();
            S var = (x.row(r).array() - mean).square().mean();
            S is = S(1) / std::sqrt(var + eps);
            (*inv_std)[size_t(r)] = is;
            out.row(r) = ((x.row(r).array() - mean) * is).matrix();
        }
        Ref o = alloc(std::move(out), needs_grad(a));
        node(o).back = [a, o, inv_std](Tape& t) {
            if (!t.needs_grad(a)) return;
            const M& y = t.val(o);
            const M& g = t.node(o).grad;
            M& ga = t.grad(a);
            for (Eigen::Index r = 0; r < y.rows(); r++) {
                S gm = g.row(r).mean();
                S gym = g.row(r).cwiseProduct(y.row(r)).mean();
                ga.row(r) +=
                    ((*inv_std)[size_t(r)] * (g.row(r).array() - gm - y.row(r).array() * gym))
                        .matrix();
            }
        };
        return o;
    }

    // Multi-head softmax attention over independent blocks of `block` rows.
    // q, k, v: (B*block) x (heads*dh). Attention never crosses block bounds.
    Ref attention(Ref q, Ref k, Ref v, int heads, int block) {
        const M& Q = val(q);
        if (Q.rows() != val(k).rows() || Q.rows() != val(v).rows() || Q.cols() != val(k).cols() ||
            Q.cols() != val(v).cols())
            throw ValidationError("attention: q/k/v shapes differ");
        if (heads < 1 || Q.cols() % heads != 0)
            throw ValidationError("attention: cols not divisible by heads");
        if (block < 1 || Q.rows() % block != 0)
            throw ValidationError("attention: rows not divisible by block");
        const int dh = int(Q.cols()) / heads;
        const int nb = int(Q.rows()) / block;
        const S inv = S(1) / std::sqrt(S(dh));

        auto probs = std::make_shared<std::vector<M>>();
        probs->reserve(size_t(nb) * heads);
        M out(Q.rows(), Q.cols());
        for (int b = 0; b < nb; b++)
            for (int h = 0; h < heads; h++) {
                auto Qb = Q.block(b * block, h * dh, block, dh);
                auto Kb = val(k).block(b * block, h * dh, block, dh);
                auto Vb = val(v).block(b * block, h * dh, block, dh);
                M sc = (Qb * Kb.transpose()) * inv;
                for (Eigen::Index r = 0; r < sc.rows(); r++) {
                    S mx = sc.row(r).maxCoeff();
                    sc.row(r) = (sc.row(r).array() - mx).exp();
                    sc.row(r) /= sc.row(r).sum();
                }
                out.block(b * block, h * dh, block, dh).noalias() = sc * Vb;
                probs->push_back(std::move(sc));
            }

        Ref o = alloc(std::move(out), needs_grad(q) || needs_grad(k) || needs_grad(v));
        node(o).back = [q, k, v, heads, block, dh, nb, inv, probs, o](Tape& t) {
            const M& g = t.node(o).grad;
            const M& Q2 = t.val(q);
            const M& K2 = t.val(k);
            const M& V2 = t.val(v);
            for (int b = 0; b < nb; b++)
                for (int h = 0; h < heads; h++) {
                    const M& P = (*probs)[size_t(b) * heads + h];
                    auto Qb = Q2.block(b * block, h * dh, block, dh);
                    auto Kb = K2.block(b * block, h * dh, block, dh);
                    auto Vb = V2.block(b * block, h * dh, block, dh);
                    auto gb = g.block(b * block, h * dh, block, dh);
                    if (t.needs_grad(v))
                        t.grad(v).block(b * block, h * dh, block, dh).noalias() +=
                            P.transpose() * gb;
                    if (!t.needs_grad(q) && !t.needs_grad(k)) continue;
                    M dP = gb * Vb.transpose();
                    M dS = P.cwiseProduct(dP);
                    for (Eigen::Index r = 0; r < dS.rows(); r++)
                        dS.row(r) -= P.row(r) * dS.row(r).sum();
                    if (t.needs_grad(q))
                        t.grad(q).block(b * block, h * dh, block, dh).noalias() += dS * Kb * inv;
                    if (t.needs_grad(k))
                        t.grad(k).block(b * block, h * dh, block, dh).noalias() +=
                            dS.transpose() * Qb * inv;
                }
        };
        return o;
    }

    // ---- losses ------------------------------------------------------------

    // Row-weighted mean squared error: sum_i w_i |p_i - t_i|^2 / (C * sum w).
    // All weights zero yields a constant 0 with no gradient.
    Ref masked_mse(Ref pred, Ref target, std::vector<S> w) {
        check_same_shape(pred, target, "masked_mse");
        if (Eigen::Index(w.size()) != val(pred).rows())
            throw ValidationError("masked_mse: one weight per row required");
        S wsum = S(0);
        for (S x : w) {
            if (x < S(0)) throw ValidationError("masked_mse: weights must be >= 0");
            wsum += x;
        }
        if (wsum == S(0)) return constant(M::Zero(1, 1));
        const M& P = val(pred);
        const M& T = val(target);
        S z = wsum * S(P.cols());
        S acc = S(0);
        for (Eigen::Index r = 0; r < P.rows(); r++)
            acc += w[size_t(r)] * (P.row(r) - T.row(r)).squaredNorm();
        M out(1, 1);
        out(0, 0) = acc / z;
        Ref o = alloc(std::move(out), needs_grad(pred) || needs_grad(target));
        node(o).back = [pred, target, w = std::move(w), z, o](Tape& t) {
            S g = t.node(o).grad(0, 0);
            const M& P2 = t.val(pred);
            const M& T2 = t.val(target);
            for (Eigen::Index r = 0; r < P2.rows(); r++) {
                if (w[size_t(r)] == S(0)) continue;
                S c = g * S(2) * w[size_t(r)] / z;
                if (t.needs_grad(pred)) t.grad(pred).row(r) += c * (P2.row(r) - T2.row(r));
                if (t.needs_grad(target)) t.grad(target).row(r) -= c * (P2.row(r) - T2.row(r));
            }
        };
        return o;
    }

    Ref mse(Ref pred, Ref target) {
        return masked_mse(pred, target, std::vector<S>(size_t(val(pred).rows()), S(1)));
    }

    // Negative weighted mean of row cosine similarities; the alignment loss.
    // Zero-norm rows contribute cosine 0 and no gradient.
    Ref neg_mean_cosine(Ref pred, Ref target, std::vector<S> w) {
        check_same_shape(pred, target, "neg_mean_cosine");
        if (Eigen::Index(w.size()) != val(pred).rows())
            throw ValidationError("neg_mean_cosine: one weight per row required");
        S wsum = S(0);
        for (S x : w) {
            if (x < S(0)) throw ValidationError("neg_mean_cosine: weights must be >= 0");
            wsum += x;
        }
        if (wsum == S(0)) return constant(M::Zero(1, 1));
        const M& P = val(pred);
        const M& T = val(target);
        const S tiny = S(1e-12);
        S acc = S(0);
        for (Eigen::Index r = 0; r < P.rows(); r++) {
            S pn = P.row(r).norm(), tn = T.row(r).norm();
            if (pn < tiny || tn < tiny) continue;
            acc += w[size_t(r)] * P.row(r).dot(T.row(r)) / (pn * tn);
        }
        M out(1, 1);
        out(0, 0) = -acc / wsum;
        Ref o = alloc(std::move(out), needs_grad(pred));
        node(o).back = [pred, target, w = std::move(w), wsum, tiny, o](Tape& t) {
            if (!t.needs_grad(pred)) return;
            S g = t.node(o).grad(0, 0);
            const M& P2 = t.val(pred);
            const M& T2 = t.val(target);
            for (Eigen::Index r = 0; r < P2.rows(); r++) {
                if (w[size_t(r)] == S(0)) continue;
                S pn = P2.row(r).norm(), tn = T2.row(r).norm();
                if (pn < tiny || tn < tiny) continue;
                S cs = P2.row(r).dot(T2.row(r)) / (pn * tn);
                t.grad(pred).row(r) += g * (-w[size_t(r)] / wsum) *
                                       (T2.row(r) / (pn * tn) - cs * P2.row(r) / (pn * pn));
            }
        };
        return o;
    }

    Ref mean_all(Ref a) {
        const M& x = val(a);
        M out(1, 1);
        out(0, 0) = x.mean();
        Ref o = alloc(std::move(out), needs_grad(a));
        node(o).back = [a, o](Tape& t) {
            if (!t.needs_grad(a)) return;
            const M& x2 = t.val(a);
            t.grad(a).array() += t.node(o).grad(0, 0) / S(x2.size());
        };
        return o;
    }

private:
    struct Node {
        M val;
        M grad;
        bool needs = false;
        std::function<void(Tape&)> back;
    };
    std::vector<Node> nodes_;

    Node& node(Ref r) { return nodes_[size_t(r)]; }
    const Node& node(Ref r) const { return nodes_[size_t(r)]; }

    Ref alloc(M v, bool needs) {
        nodes_.push_back(Node{std::move(v), M{}, needs, nullptr});
        return Ref(nodes_.size() - 1);
    }

    void check_same_shape(Ref a, Ref b, const char* what) const {
        if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
            throw ValidationError(std::string(what) + ": shapes differ");
    }
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace modalflow

#endif
