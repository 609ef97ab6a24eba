"""Independent straight-line evaluations used as test oracles."""
import numpy as np

from hybrid_asr.attention import rope_matrix


def phi_ref(x, kind):
    if kind == "elu":
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0)))
    if kind == "relu":
        return np.maximum(x, 0)
    return np.exp(x)


def sa_double_loop(x, layer, cfg, offset=0):
    wq, wk, wv, wo = (w.data.astype(np.float64) for w in
                      (layer.w_q, layer.w_k, layer.w_v, layer.w_o))
    N, hd = x.shape[0], layer.head_dim
    heads = []
    for h in range(layer.heads):
        r = slice(h * hd, (h + 1) * hd)
        out = np.zeros((N, hd))
        for m in range(N):
            q = rope_matrix(m + offset, cfg) @ (wq[r] @ x[m])
            a = np.array([q @ (rope_matrix(n + offset, cfg) @ (wk[r] @ x[n])) for n in range(N)])
            e = np.exp(a / np.sqrt(hd))
            for n in range(N):
                out[m] += e[n] / e.sum() * (wv[r] @ x[n])
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo.T


def la_double_loop(x, layer, cfg, offset=0):
    wq, wk, wv, wo = (w.data.astype(np.float64) for w in
                      (layer.w_q, layer.w_k, layer.w_v, layer.w_o))
    N, hd = x.shape[0], layer.head_dim
    heads = []
    for h in range(layer.heads):
        r = slice(h * hd, (h + 1) * hd)
        out = np.zeros((N, hd))
        for m in range(N):
            fq = phi_ref(wq[r] @ x[m], layer.phi)
            num = np.zeros(hd)
            den = 0.0
            for n in range(N):
                fk = phi_ref(wk[r] @ x[n], layer.phi)
                num += (rope_matrix(m + offset, cfg) @ fq) @ (rope_matrix(n + offset, cfg) @ fk) * (wv[r] @ x[n])
                den += fq @ fk
            out[m] = num / (den + layer.eps)
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo.T


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def bn_eval_ref(x, bn):
    g, b = bn.gamma.data.astype(np.float64), bn.beta.data.astype(np.float64)
    return g * (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + b


def nsr_train_ref(x, m):
    """Straight-line eval-mode evaluation of the training-form module."""
    from conftest import conv_oracle

    x = np.asarray(x, dtype=np.float64)
    f = lambda t: t.data.astype(np.float64)
    z = x @ f(m.pw_in_w).T + f(m.pw_in_b)
    C = m.channels
    g = z[:, :C] * _sig(z[:, C:])
    h = bn_eval_ref(conv_oracle(g, f(m.trunk_kernel), f(m.trunk_bias), 15, 15), m.trunk_bn)
    for a, br in zip(m.alpha, m.branches):
        k = br.kernel_size
        if k == 0:
            out = g
        else:
            out = conv_oracle(g, f(br.kernel), f(br.bias), k // 2, (k - 1) // 2)
        h = h + a * bn_eval_ref(out, br.bn)
    h = bn_eval_ref(h, m.post_bn)
    return (h * _sig(h)) @ f(m.pw_out_w).T + f(m.pw_out_b)


def nsr_fused_ref(x, m):
    from conftest import conv_oracle

    f = lambda t: t.data.astype(np.float64)
    z = np.asarray(x, np.float64) @ f(m.pw_in_w).T + f(m.pw_in_b)
    C = m.channels
    g = z[:, :C] * _sig(z[:, C:])
    h = conv_oracle(g, f(m.kernel), f(m.bias), 15, 15)
    return (h * _sig(h)) @ f(m.pw_out_w).T + f(m.pw_out_b)
