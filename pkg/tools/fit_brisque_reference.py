"""Fit the packaged BRISQUE reference scorer on a procedural desk corpus.

Each clean image is scored 0; each distorted copy is labelled from its PSNR
against the clean original (``100 - 2 * min(psnr, 50)``), so the scorer
ranks distortion strength the way the published model ranks opinion scores.
Needs scikit-learn (``pip install -e .[dev]``); the package itself does not.

    python3 tools/fit_brisque_reference.py [--out PATH] [--n 120] [--seed 4242]
"""
from __future__ import annotations

import argparse

import numpy as np
from sklearn.svm import SVR

from uniremoval.degradations import degrade, make_clean_image, sample_params
from uniremoval.imagedata import DegradationKind, normalize, worker_rng
from uniremoval.metrics import BrisqueModel, brisque_features, psnr, reference_model_path


def distorted_copies(clean01, rng):
    yield clean01
    for kind in DegradationKind:
        for domain in ("synthetic", "real"):
            yield degrade(clean01, kind, sample_params(kind, clean01.shape[1:], rng, domain), rng)
    for sigma in (0.02, 0.05, 0.1):
        yield np.clip(clean01 + rng.normal(0, sigma, clean01.shape), 0, 1)


def build_corpus(n, size, seed):
    feats, labels = [], []
    for i in range(n):
        rng = worker_rng(seed, i, 0)
        clean = normalize(make_clean_image(size, size, rng))
        for img01 in distorted_copies((clean + 1) / 2, rng):
            img = normalize(img01)
            try:
                f = brisque_features(img)
            except ValueError:
                continue
            feats.append(f)
            labels.append(max(0.0, 100.0 - 2.0 * min(psnr(img, clean), 50.0)))
    return np.asarray(feats), np.asarray(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(reference_model_path()))
    ap.add_argument("--n", type=int, default=120)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=4242)
    args = ap.parse_args(argv)

    x, y = build_corpus(args.n, args.size, args.seed)
    lo, hi = x.min(0), x.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    xs = 2.0 * (x - lo) / span - 1.0
    gamma = 1.0 / (xs.shape[1] * xs.var())
    svr = SVR(kernel="rbf", C=30.0, epsilon=4.0, gamma=gamma).fit(xs, y)

    model = BrisqueModel(float(svr.intercept_[0]), None, svr.support_vectors_.copy(),
                         svr.dual_coef_[0].copy(), float(gamma), lo, hi,
                         {"corpus": "procedural desk corpus", "n_clean": args.n, "size": args.size,
                          "seed": args.seed, "label": "100 - 2*min(psnr, 50)",
                          "samples": int(len(y))})
    pred = np.array([model.predict(f) for f in x])
    rho = np.corrcoef(pred, y)[0, 1]
    model.meta["train_pearson"] = round(float(rho), 4)
    model.save(args.out)
    print(f"{len(y)} samples, {len(svr.support_vectors_)} support vectors, train r={rho:.3f} -> {args.out}")


if __name__ == "__main__":
    main()
