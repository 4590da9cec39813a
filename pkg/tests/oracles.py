"""Independent reference implementations used by the tests.

Nothing here imports the gradient or curvature code under test: the network
is re-simulated with plain loops, gradients come from finite differences or
from an explicit sensitivity-tensor recursion, and Hessians from dense
second differences.
"""
import numpy as np


def act(name, u):
    if name == "tanh":
        return np.tanh(u)
    if name == "relu":
        return np.maximum(u, 0.0)
    return u


def dact(name, u):
    if name == "tanh":
        return 1.0 - np.tanh(u) ** 2
    if name == "relu":
        return (u > 0).astype(float)
    return np.ones_like(u)


def unflatten(w, n, n_in, n_out):
    a = n * n_in
    b = a + n * n
    return w[:a].reshape(n, n_in), w[a:b].reshape(n, n), w[b:].reshape(n_out, n)


def simulate(w, x, n, n_out, alpha=0.0, beta=0.0, n_adaptive=0, activation="tanh"):
    """One example x of shape (T, N_in); returns (h, b, y_hat) lists, t = 1..T."""
    T, n_in = x.shape
    Wx, Wh, wo = unflatten(np.asarray(w, dtype=float), n, n_in, n_out)
    a = np.zeros(n)
    a[:n_adaptive] = 1.0
    h, b = np.zeros(n), np.zeros(n)
    hs, bs, ys = [], [], []
    for t in range(T):
        r = act(activation, h - b)
        h_new = alpha * h + (1 - alpha) * (Wh @ r + Wx @ x[t])
        b = a * (beta * b + (1 - beta) * r)
        h = h_new
        hs.append(h.copy())
        bs.append(b.copy())
        ys.append(wo @ act(activation, h - b))
    return hs, bs, ys


def mse_loss(w, X, Y, n, n_out, mask=None, **kw):
    """0.5 * sum over batch and masked steps of squared error / (|mask| B)."""
    B, T, _ = X.shape
    mask = list(range(T)) if mask is None else mask
    total = 0.0
    for i in range(B):
        _, _, ys = simulate(w, X[i], n, n_out, **kw)
        for m, t in enumerate(mask):
            d = ys[t] - Y[i, m]
            total += 0.5 * float(d @ d)
    return total / (len(mask) * B)


def fd_gradient(f, w, h=1e-6):
    w = np.asarray(w, dtype=float)
    g = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rtrl_oracle(w, X, Y, n, n_out, mode="full", alpha=0.0, beta=0.0, n_adaptive=0, activation="tanh"):
    """Mse gradient over all steps from an explicit sensitivity recursion.

    The state z = (h, b) has sensitivities S = dz/dtheta for theta in
    (W_x, W_h).  ``mode``:
      full          S' = A S + I
      same_neuron   S' = M(A) S + I, with M keeping only each neuron's own
                    (h_i, b_i) 2x2 block
      one_step      the same-neuron traces S, but the readout uses A S + I
                    (one connection step restored, no further propagation)
    """
    B, T, n_in = X.shape
    Wx, Wh, wo = unflatten(np.asarray(w, dtype=float), n, n_in, n_out)
    p = n * n_in + n * n
    a = np.zeros(n)
    a[:n_adaptive] = 1.0
    grad = np.zeros(np.asarray(w).size)
    for i in range(B):
        h, b = np.zeros(n), np.zeros(n)
        S = np.zeros((2 * n, p))
        for t in range(T):
            u = h - b
            r = act(activation, u)
            fp = dact(activation, u)
            # A = d z_{t+1} / d z_t
            A = np.zeros((2 * n, 2 * n))
            A[:n, :n] = alpha * np.eye(n) + (1 - alpha) * Wh * fp[None, :]
            A[:n, n:] = -(1 - alpha) * Wh * fp[None, :]
            A[n:, :n] = np.diag(a * (1 - beta) * fp)
            A[n:, n:] = np.diag(a * (beta - (1 - beta) * fp))
            Imm = np.zeros((2 * n, p))
            for q in range(n):
                for k in range(n_in):
                    Imm[q, q * n_in + k] = (1 - alpha) * x_at(X, i, t, k)
                for j in range(n):
                    Imm[q, n * n_in + q * n + j] = (1 - alpha) * r[j]
            if mode == "full":
                S_new = A @ S + Imm
                S_read = S_new
            else:
                M = np.zeros_like(A)
                idx = np.arange(n)
                for blk_r, blk_c in ((0, 0), (0, n), (n, 0), (n, n)):
                    M[blk_r + idx, blk_c + idx] = A[blk_r + idx, blk_c + idx]
                S_new = M @ S + Imm
                S_read = S_new if mode == "same_neuron" else A @ S + Imm
            h = alpha * h + (1 - alpha) * (Wh @ r + Wx @ X[i, t])
            b = a * (beta * b + (1 - beta) * r)
            S = S_new
            u = h - b
            y = wo @ act(activation, u)
            err = (y - Y[i, t]) / (T * B)
            fpn = dact(activation, u)
            dy = wo * fpn[None, :]                        # (n_out, n)
            grad[:p] += err @ (dy @ (S_read[:n] - S_read[n:]))
            grad[p:] += np.outer(err, act(activation, u)).ravel()
    return grad


def x_at(X, i, t, k):
    return X[i, t, k]


def dense_hessian_fd(f, w, h=1e-4):
    """Second differences of a scalar function (symmetric by construction)."""
    w = np.asarray(w, dtype=float)
    d = w.size
    H = np.zeros((d, d))
    f0 = f(w)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h
        H[a, a] = (f(w + ea) - 2 * f0 + f(w - ea)) / h ** 2
        for c in range(a + 1, d):
            ec = np.zeros(d)
            ec[c] = h
            H[a, c] = H[c, a] = (f(w + ea + ec) - f(w + ea - ec) - f(w - ea + ec) + f(w - ea - ec)) / (4 * h * h)
    return H


def idx_bytes(magic, dims, payload):
    """Reference IDX serializer written from the format description."""
    import struct
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


def adam_reference(g_seq, eta, b1=0.9, b2=0.999, eps=1e-8, w0=0.0):
    """Scalar Adam written out step by step."""
    w, m, v = w0, 0.0, 0.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - eta * mh / (np.sqrt(vh) + eps)
        out.append(w)
    return out


def tbptt_surrogate(w0, X, Y, n, n_out, truncation, alpha=0.0, beta=0.0, n_adaptive=0, activation="tanh"):
    """Scalar function of w whose gradient at w0 is the truncated-BPTT gradient.

    The readout at step t is recomputed from the state at step t - 1 - K,
    K = T - 1 - truncation, held fixed at its w0 value (a detached graph), and
    unrolled K + 1 transitions with the free parameters w.  Full-step mse
    normalisation.
    """
    B, T, n_in = X.shape
    K = T - 1 - truncation
    a = np.zeros(n)
    a[:n_adaptive] = 1.0
    frozen = []
    for i in range(B):
        hs, bs, _ = simulate(w0, X[i], n, n_out, alpha, beta, n_adaptive, activation)
        frozen.append(([np.zeros(n)] + hs, [np.zeros(n)] + bs))

    def f(w):
        Wx, Wh, wo = unflatten(np.asarray(w, dtype=float), n, n_in, n_out)
        total = 0.0
        for i in range(B):
            H, Bt = frozen[i]
            for t in range(1, T + 1):
                s = max(0, t - 1 - K)
                h, b = H[s].copy(), Bt[s].copy()
                for tau in range(s, t):
                    r = act(activation, h - b)
                    h_new = alpha * h + (1 - alpha) * (Wh @ r + Wx @ X[i, tau])
                    b = a * (beta * b + (1 - beta) * r)
                    h = h_new
                d = wo @ act(activation, h - b) - Y[i, t - 1]
                total += 0.5 * float(d @ d)
        return total / (T * B)
    return f
