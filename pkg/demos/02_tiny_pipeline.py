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
# # One unified restorer, three degradations: a two-minute walkthrough
#
# The framework trains in three steps:
#
# 1. **Teachers**: one restorer per degradation kind (haze, rain, blur),
#    each supervised on synthetic pairs.
# 2. **Knowledge transfer**: a single student learns from all three frozen
#    teachers at once. It sees mixed batches and routes every sample to the
#    teacher for that sample's kind. A contrastive term pushes student
#    outputs toward teacher outputs and away from the degraded inputs.
# 3. **Domain adaptation**: the student is fine-tuned on unpaired "real"
#    images using a patch discriminator and an identity term on clear images.
#
# The acceptance suite runs this at desk scale (200 images of 64x64, thousands
# of iterations). Here everything is shrunk so the whole notebook finishes in
# a couple of minutes on one core. The numbers are only illustrative.

# %%
import tempfile
from pathlib import Path

import matplotlib
try:
    get_ipython()
except NameError:
    matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from uniremoval import degradations as D
from uniremoval import training as T
from uniremoval.config import load_train_config
from uniremoval.imagedata import DegradationKind, PairedDataset, UnpairedDataset, denormalize

root = Path(tempfile.mkdtemp(prefix="uniremoval_demo_"))
D.write_clean_corpus(root / "clean", 60, 64, seed=0)
D.write_clean_corpus(root / "clean_real", 60, 64, seed=1)
D.build_synthetic_dataset(root / "clean", root / "synthetic", seed=0)
D.build_real_dataset(root / "clean_real", root / "real", seed=0)
kinds = list(DegradationKind)
paired = {k: PairedDataset.from_root(root / "synthetic", k) for k in kinds}

# %% [markdown]
# ## Teachers
#
# Each teacher is the tiny desk backbone trained on L1 alone. `heldout_psnr`
# compares restored and degraded images against ground truth on a seeded 10%
# split.

# %%
small = ["iterations=300"]
teacher_cfg = load_train_config("teacher", overrides=small)
teachers = {}
for k in kinds:
    teachers[k.label] = T.train_teacher(k, paired[k], teacher_cfg)
    rep = teachers[k.label].extra["heldout_psnr"]
    print(f"{k.label:5s} degraded {rep['degraded']:.2f} dB -> teacher {rep['restored']:.2f} dB")

# %% [markdown]
# ## Knowledge transfer
#
# One student, one parameter set. `alpha1` (the weight of the feature-level
# contrastive term) decays by 0.99 per epoch. One epoch is one pass over the
# smallest per-kind training split.

# %%
kt_cfg = load_train_config("kt", overrides=["iterations=300"])
student = T.train_kt(teachers, {k.label: paired[k] for k in kinds}, kt_cfg)
for label, rep in student.extra["heldout_psnr"].items():
    print(f"{label:5s} teacher {rep['teacher']:.2f} dB, student {rep['restored']:.2f} dB")

# %% [markdown]
# ## Domain adaptation
#
# The student keeps its parameters and picks up a discriminator. The real
# corpus has shifted parameter ranges and no pairing, so the log is the main
# signal: the identity loss should fall and every term should stay finite.

# %%
da_cfg = load_train_config("da", overrides=["iterations=100"])
adapted = T.train_da(student, UnpairedDataset.from_root(root / "real"), da_cfg)
log = adapted.extra["log"]
fig, axes = plt.subplots(1, 2, figsize=(8, 3))
for ax, col in zip(axes, ("loss_idt", "loss_d")):
    ax.plot([r["iteration"] for r in log], [r[col] for r in log])
    ax.set_title(col)
fig.tight_layout()
fig.savefig("tiny_pipeline_da.png", dpi=100)

# %% [markdown]
# ## Looking at a restoration
#
# One held-out hazy image goes through the adapted student. The student gets
# no kind flag.

# %%
net = T.student_from_checkpoint(adapted)
haze = paired[DegradationKind.HAZE]
degraded, clean = (a[-1] for a in haze.arrays)
restored = T.restore_array(net, degraded[None])[0]
fig, axes = plt.subplots(1, 3, figsize=(7, 2.6))
for ax, img, title in zip(axes, (degraded, restored, clean), ("degraded", "restored", "clean")):
    ax.imshow(np.transpose(denormalize(img), (1, 2, 0)))
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig("tiny_pipeline_sample.png", dpi=100)
