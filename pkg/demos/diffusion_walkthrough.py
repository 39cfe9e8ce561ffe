"""
Masked diffusion on a short token sequence
==========================================

Forward noising, the reverse posterior, and ancestral sampling with a
model that already knows the answer.
"""

import numpy as np

from smdim import diffusion as dif

T = 8
K = 5                      # real tokens 0..4, MASK is id 5
kernel = dif.AbsorbingKernel(K, dif.make_schedule(T))
rng = np.random.default_rng(0)

# alpha_bar falls linearly from 1 to 0, so half the tokens are gone at t = T/2
print("alpha_bar:", np.round(kernel.schedule.alpha_bar, 3))

x0 = np.array([0, 1, 2, 3, 4, 3, 2, 1, 0, 1, 2, 3])
for t in (0, 2, 4, 6, 8):
    xt = dif.q_sample(x0, t, kernel, rng)
    print(f"t={t}:", "".join("_" if v == K else str(v) for v in xt))

# a masked position at step t reverts to its clean token with probability 1/t
for t in (1, 2, 4, 8):
    print(f"revert prob at t={t}: {kernel.revert_prob(t):.4f}")

post = dif.q_posterior(np.array([K]), np.array([3]), 4, kernel)[0]
print("posterior of a masked 3 at t=4:", np.round(post, 3))

# loss is zero once the model puts all its mass on the right tokens
xt = dif.q_sample(x0, 5, kernel, rng)
confident = np.full((len(x0), K), -30.0)
confident[np.arange(len(x0)), x0] = 30.0
uniform = np.zeros((len(x0), K))
for name, logits in (("confident", confident), ("uniform", uniform)):
    print(f"loss at t=5 with {name} logits: {dif.elbo_loss(logits, xt, x0, 5, kernel).loss.item():.4f}")


def oracle(x, t):
    logits = np.full(x.shape + (K,), -30.0)
    np.put_along_axis(logits, np.broadcast_to(x0, x.shape)[..., None], 30.0, axis=-1)
    return logits


# with stride 2 only t = 8, 6, 4, 2 are visited; the clean sequence comes back either way
for stride in (1, 2):
    out = dif.sample(oracle, len(x0), kernel, rng, stride=stride)
    print(f"stride {stride} sample:", out, "matches x0:", bool((out == x0).all()))
