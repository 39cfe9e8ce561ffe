"""Brute-force references shared by the unit and acceptance suites.

Everything here is plain numpy written without reference to the package's
closed forms.
"""

import numpy as np

from smdim import tensor as tn
from smdim.diffusion import batch_elbo_loss
from smdim.model import smdim_forward
from smdim.tensor import Tensor


# absorbing diffusion ----------------------------------------------------

def oracle_Q(K, beta):
    """One-step absorbing matrix built entry by entry."""
    Q = np.zeros((K + 1, K + 1))
    for i in range(K + 1):
        for j in range(K + 1):
            if i == K:
                Q[i, j] = 1.0 if j == K else 0.0
            elif j == i:
                Q[i, j] = 1.0 - beta
            elif j == K:
                Q[i, j] = beta
    return Q


def oracle_Qbar(K, betas, t):
    out = np.eye(K + 1)
    for s in range(t):
        out = out @ oracle_Q(K, betas[s])
    return out


def oracle_posterior(K, betas, x_t, x0, t):
    """Bayes: q(x_{t-1}=j | x_t, x0) = Q_t[j, x_t] Qbar_{t-1}[x0, j] / Qbar_t[x0, x_t]."""
    Qt = oracle_Q(K, betas[t - 1])
    prev, cur = oracle_Qbar(K, betas, t - 1), oracle_Qbar(K, betas, t)
    return np.array([Qt[j, x_t] * prev[x0, j] / cur[x0, x_t] for j in range(K + 1)])


def oracle_loss(K, betas, T, logits, x_t, x0, t):
    """Sum over masked positions of KL[q(x_{t-1}|x_t,x0) || sum_x0' q(.|x_t,x0') p(x0')]."""
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    total = 0.0
    for i in range(len(x0)):
        if x_t[i] != K:
            continue
        q = oracle_posterior(K, betas, x_t[i], x0[i], t)
        mix = sum(p[i, c] * oracle_posterior(K, betas, x_t[i], c, t) for c in range(K))
        nz = q > 0
        total += float((q[nz] * np.log(q[nz] / mix[nz])).sum())
    w = 1.0 if t == 1 else max(0.0, (T - t - 1) / T)
    return w * total


# selective SSM ----------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def naive_ssm(x, sa_w, sa_b, sb_w, sc_w, A):
    """Zero-order-hold recurrence, one position and one channel at a time."""
    L, D = x.shape
    N = A.shape[1]
    delta = softplus(x @ sa_w + sa_b)
    B, C = x @ sb_w, x @ sc_w
    h = np.zeros((D, N))
    y = np.zeros((L, D))
    for t in range(L):
        for d in range(D):
            for n in range(N):
                z = delta[t, d] * A[d, n]
                phi = np.expm1(z) / z if z != 0 else 1.0
                h[d, n] = np.exp(z) * h[d, n] + phi * delta[t, d] * B[t, n] * x[t, d]
            y[t, d] = h[d] @ C[t]
    return y


# gradients --------------------------------------------------------------

def perturbed(params, rng, scale=0.3):
    """Copy of ``params`` with every entry jittered (zero-init layers become live)."""
    return {k: Tensor(v.data + scale * rng.standard_normal(v.shape), requires_grad=True)
            for k, v in params.items()}


def tiny_loss(cfg, names, x_t, x0, t, kernel):
    def f(*tensors):
        params = dict(zip(names, tensors))
        return batch_elbo_loss(smdim_forward(x_t, t, params, cfg), x_t, x0, t, kernel)
    return f


def sample_coords(params, names, n, rng):
    """``n`` distinct (input index, flat index) pairs drawn over all parameters."""
    sizes = [params[k].size for k in names]
    offsets = np.cumsum([0] + sizes)
    flat = rng.choice(offsets[-1], size=n, replace=False)
    owner = np.searchsorted(offsets, flat, "right") - 1
    return [(int(i), int(j - offsets[i])) for i, j in zip(owner, flat)]


def model_grad_error(cfg, params, kernel, rng, n_coords):
    names = list(params)
    x0 = rng.integers(0, cfg.vocab_size - 1, size=(2, cfg.L_in))
    t = np.array([1, 3])
    x_t = x0.copy()
    x_t[rng.random(x0.shape) < 0.5] = kernel.mask_id
    coords = sample_coords(params, names, n_coords, rng)
    return tn.grad_check(tiny_loss(cfg, names, x_t, x0, t, kernel),
                         [params[k] for k in names], eps=3e-4, coords=coords, floor=1e-6)
