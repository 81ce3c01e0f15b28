# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: uniremoval
#     language: python
#     name: python3
# ---

# %% [markdown]
# # How the contrastive loss behaves as the temperature shrinks
#
# **Question**: the default temperature is 1e-6. What does the loss look like
# at that temperature, and does anything survive in floating point?
#
# A textbook implementation exponentiates `cos / tau` directly. At `tau = 1e-6`
# a cosine of 0.001 already gives `exp(1000)`, which is past the float64 range.
# The package computes the loss as `softplus(logsumexp(neg) - logsumexp(pos))`,
# so it never forms the large exponentials.
#
# This notebook sweeps the temperature for one fixed anchor/positive/negative
# triple and plots:
# - the log-space loss, which stays finite everywhere;
# - the naive loss, which goes non-finite once `1/tau` gets large.

# %%
import math

import matplotlib
try:
    get_ipython()
except NameError:
    matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from uniremoval import losses as L

# %%
anchor = torch.tensor([1.0, 0.0], dtype=torch.float64)
positive = torch.tensor([0.95, 0.31], dtype=torch.float64)     # cos ~ 0.95
negatives = torch.tensor([[0.8, 0.6], [0.0, 1.0]], dtype=torch.float64)  # cos 0.8 and 0


def naive(tau):
    cos = lambda u, v: float(u @ v / (u.norm() * v.norm()))
    try:
        pos = math.exp(cos(anchor, positive) / tau)
        neg = sum(math.exp(cos(anchor, n) / tau) for n in negatives)
        return -math.log(pos / (pos + neg))
    except OverflowError:
        return float("nan")


taus = np.logspace(-6, 0.5, 60)
stable = [L.contrastive(anchor, positive, negatives, float(t)).item() for t in taus]
direct = [naive(float(t)) for t in taus]
first_bad = max(t for t, v in zip(taus, direct) if not math.isfinite(v))
print(f"naive loss fails for every tau <= {first_bad:.2e}")
print(f"log-space loss at tau=1e-6: {stable[0]!r}")

# %% [markdown]
# At small temperatures the loss collapses to a hard comparison. If the
# positive is the closest vector the loss is exactly zero. If a negative is
# closer, the loss grows like `(cos_neg - cos_pos) / tau`. With the default
# temperature, a batch whose positives all win gives a gradient of zero.
# That is why the desk profile trains with `tau = 1`.

# %%
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.loglog(taus, np.maximum(stable, 1e-300), label="log-space")
ax.loglog(taus, np.where(np.isfinite(direct), np.maximum(direct, 1e-300), np.nan), "--", label="direct exp")
ax.axvline(first_bad, color="grey", linewidth=0.8)
ax.set_xlabel("tau")
ax.set_ylabel("loss")
ax.legend()
fig.tight_layout()
fig.savefig("contrastive_temperature.png", dpi=100)

# %% [markdown]
# Swap the positive and the first negative and the picture changes. The loss
# no longer vanishes. It grows without bound as the temperature shrinks, and
# it stays finite all the way down.

# %%
swapped = L.contrastive(anchor, negatives[1], torch.stack([positive, negatives[0]]), 1e-6).item()
print(f"positive loses at tau=1e-6: loss = {swapped:.4g}")
