"""Teacher pretraining, knowledge transfer (KT) and domain adaptation (DA).

The three procedures run sequentially: one teacher per degradation kind,
then a single student distilled from the frozen teachers, then the student
fine-tuned adversarially on unpaired real images.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .imagedata import (
    DegradationKind,
    EpochSampler,
    PairedDataset,
    UnpairedDataset,
    make_mixed_batch,
)
from .metrics import psnr
from .networks import (
    Backbone,
    BackboneConfig,
    DiscriminatorConfig,
    PatchDiscriminator,
    PerceptualExtractor,
    build_phi,
    init_backbone,
    init_discriminator,
    pool_features,
)

CHECKPOINT_MAGIC = b"UNIRMV-CKPT\n"
CHECKPOINT_VERSION = 1
LOG_TAIL = 20


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class StageError(ValueError):
    pass


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    epoch: int
    iteration: int
    backbone: dict
    backbone_config: dict
    config_hash: str
    config: dict
    kind: str | None = None
    discriminator: dict | None = None
    discriminator_config: dict | None = None
    optimizer: dict | None = None
    discriminator_optimizer: dict | None = None
    rng_state: dict = field(default_factory=dict)
    log_tail: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def build_backbone(self) -> Backbone:
        net = Backbone(BackboneConfig(**self.backbone_config))
        net.load_state_dict(self.backbone)
        return net

    def build_discriminator(self) -> PatchDiscriminator | None:
        if self.discriminator is None:
            return None
        net = PatchDiscriminator(DiscriminatorConfig(**self.discriminator_config))
        net.load_state_dict(self.discriminator)
        return net


def _state(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``magic | header-json | payload``; the header carries the payload's
    length and SHA-256 so truncation or corruption is detected on load."""
    buf = io.BytesIO()
    torch.save(ckpt.__dict__, buf)
    payload = buf.getvalue()
    header = json.dumps({"version": ckpt.version, "stage": ckpt.stage, "length": len(payload),
                         "sha256": hashlib.sha256(payload).hexdigest()}).encode() + b"\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + header + payload)
    tmp.replace(path)


def load_checkpoint(path, expected_stage: str | Sequence[str] | None = None,
                    expected_config_hash: str | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    payload = rest[nl + 1:]
    if len(payload) != header["length"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    data = torch.load(io.BytesIO(payload), weights_only=False)
    ckpt = Checkpoint(**data)
    if expected_stage is not None:
        allowed = (expected_stage,) if isinstance(expected_stage, str) else tuple(expected_stage)
        if ckpt.stage not in allowed:
            raise StageError(f"{path}: checkpoint stage {ckpt.stage!r} is not one of {allowed}")
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash and not force:
        raise CheckpointError(f"{path}: configuration hash differs from the checkpoint's; pass force to override")
    return ckpt


# --------------------------------------------------------------------------
# logging
# --------------------------------------------------------------------------

class TrainLog:
    """Per-iteration records, optionally streamed to CSV."""

    def __init__(self, columns: Sequence[str], path=None):
        self.columns = ["iteration", "epoch", *columns, "wall_clock"]
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, iteration: int, epoch: int, values: Mapping[str, float]) -> dict:
        rec = {"iteration": iteration, "epoch": epoch}
        for key in self.columns[2:-1]:
            value = float(values[key])
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite {key}={value} at iteration {iteration} (epoch {epoch}); values: "
                    + ", ".join(f"{k}={float(v):.6g}" for k, v in values.items()))
            rec[key] = value
        rec["wall_clock"] = time.perf_counter() - self._t0
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([repr(rec[c]) if isinstance(rec[c], float) else rec[c]
                                         for c in self.columns])
        return rec

    def tail(self, n: int = LOG_TAIL) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_clock"} for r in self.records[-n:]]

    def column(self, name: str) -> np.ndarray:
        return np.asarray([r[name] for r in self.records])


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k in ("iteration", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

@contextmanager
def deterministic_mode(cfg: TrainConfig, salt: int = 0):
    """Pin thread count, deterministic kernels and a seeded (forked) global
    torch RNG for the duration of a run."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    if cfg.threads:
        torch.set_num_threads(int(cfg.threads))
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed * 1000 + salt)
            yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas))


def _total_iterations(cfg: TrainConfig, steps_per_epoch: int) -> int:
    if cfg.iterations is not None:
        return int(cfg.iterations)
    return int(cfg.epochs) * steps_per_epoch


def _tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _check_finite_params(module: torch.nn.Module, where: str) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteLossError(f"parameter {name} became non-finite ({where})")


def _rng_state(sampler_seed: int) -> dict:
    return {"seed": sampler_seed, "torch": torch.random.get_rng_state()}


def _maybe_resume(resume: Checkpoint | None, cfg: TrainConfig, stage: str, force: bool):
    if resume is None:
        return 0
    if resume.stage != stage:
        raise StageError(f"cannot resume a {stage} run from a {resume.stage!r} checkpoint")
    if resume.config_hash != cfg.config_hash() and not force:
        raise CheckpointError("resume checkpoint was produced with a different configuration")
    return int(resume.iteration)


@torch.no_grad()
def restore_array(net: Backbone, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Run the restorer over ``(n, 3, H, W)`` images."""
    net.eval()
    out = []
    for i in range(0, len(images), batch):
        out.append(net(_tensor(images[i:i + batch])).restored.numpy())
    return np.concatenate(out) if out else np.zeros_like(images)


def heldout_psnr(net: Backbone, data: PairedDataset) -> dict[str, float]:
    """Mean PSNR of restored and of raw degraded inputs against ground truth."""
    degraded, clean = data.arrays
    restored = restore_array(net, degraded)
    return {
        "restored": float(np.mean([psnr(r, c) for r, c in zip(restored, clean)])),
        "degraded": float(np.mean([psnr(d, c) for d, c in zip(degraded, clean)])),
    }


def _finish(ckpt: Checkpoint, out_path) -> Checkpoint:
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt


# --------------------------------------------------------------------------
# teacher pretraining
# --------------------------------------------------------------------------

def train_teacher(kind, data: PairedDataset, cfg: TrainConfig, out_path=None, log_path=None,
                  resume: Checkpoint | None = None, force: bool = False,
                  epoch_checkpoint_path=None) -> Checkpoint:
    """Supervised L1 training of one degradation-specific restorer.

    ``data`` is the full paired corpus for ``kind``; a seeded
    ``cfg.holdout_fraction`` is held out for the final PSNR report.
    """
    kind = DegradationKind.parse(kind)
    if data.kind != kind:
        raise ValueError(f"dataset holds {data.kind.label} pairs, expected {kind.label}")
    if len(data) == 0:
        raise ValueError(f"empty paired dataset for {kind.label}")
    train, held = data.split(cfg.holdout_fraction, cfg.seed)
    sampler = EpochSampler({kind: len(train)}, cfg.batch_size, cfg.seed + 101 * int(kind))
    total = _total_iterations(cfg, sampler.steps_per_epoch)

    with deterministic_mode(cfg, int(kind)):
        net = init_backbone(cfg.backbone, cfg.seed + int(kind))
        opt = _adam(net.parameters(), cfg)
        start = _maybe_resume(resume, cfg, "teacher", force)
        if resume is not None:
            net.load_state_dict(resume.backbone)
            opt.load_state_dict(resume.optimizer)
        trainlog = TrainLog(["loss_l1"], log_path)

        def snapshot(iteration):
            return Checkpoint(
                stage="teacher", kind=kind.label, epoch=sampler.epoch_of(iteration), iteration=iteration,
                backbone=_state(net), backbone_config=cfg.backbone.__dict__.copy(),
                config_hash=cfg.config_hash(), config=cfg.to_dict(),
                optimizer=opt.state_dict(), rng_state=_rng_state(sampler.seed), log_tail=trainlog.tail())

        net.train()
        for it in range(start, total):
            epoch = sampler.epoch_of(it)
            batch = make_mixed_batch({kind: train}, cfg.batch_size, sampler.batch_rng(it),
                                     cfg.patch_size, indices=sampler.indices(it))
            x, y = _tensor(batch.images), _tensor(batch.targets)
            loss = L.pixel_l1(net(x).restored, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if it % cfg.log_every == 0 or it == total - 1:
                trainlog.append(it, epoch, {"loss_l1": loss.item()})
            if epoch_checkpoint_path and (it + 1) % sampler.steps_per_epoch == 0:
                save_checkpoint(snapshot(it + 1), epoch_checkpoint_path)
        _check_finite_params(net, "teacher training")

        ckpt = snapshot(total)
        if len(held):
            ckpt.extra["heldout_psnr"] = heldout_psnr(net, held)
        ckpt.extra["log"] = trainlog.tail(len(trainlog.records))
    return _finish(ckpt, out_path)


# --------------------------------------------------------------------------
# knowledge transfer
# --------------------------------------------------------------------------

def _phi_modules(cfg: TrainConfig):
    phi_img = build_phi(cfg.phi)
    phi_feat = None
    if cfg.phi.apply_to_features:
        if cfg.phi.mode == "pretrained":
            raise ValueError("a pretrained image extractor cannot consume backbone feature maps")
        phi_feat = build_phi(cfg.phi, in_channels=cfg.backbone.feature_channels)
    return phi_img, phi_feat


def _feature_vectors(fmap: torch.Tensor, phi_feat: PerceptualExtractor | None) -> torch.Tensor:
    return pool_features(fmap) if phi_feat is None else phi_feat(fmap)


def _frozen(net: Backbone) -> Backbone:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def train_kt(teachers: Mapping, data: Mapping, cfg: TrainConfig, out_path=None, log_path=None,
             resume: Checkpoint | None = None, force: bool = False,
             epoch_checkpoint_path=None) -> Checkpoint:
    """Distil ``k`` frozen teachers into one student.

    ``teachers`` maps each kind to its teacher :class:`Checkpoint`; ``data``
    maps the same kinds to full paired corpora.  Each step draws a mixed
    batch, routes every sample through its kind's teacher and minimizes
    ``L_pixel + alpha2 * (L_ig + alpha1 * L_fg)`` on the student only.
    """
    teachers = {DegradationKind.parse(k): v for k, v in teachers.items()}
    data = {DegradationKind.parse(k): v for k, v in data.items()}
    if set(teachers) != set(data):
        raise StageError(f"teacher kinds {sorted(k.label for k in teachers)} differ from dataset kinds "
                         f"{sorted(k.label for k in data)}")
    for kind, t in teachers.items():
        if t.stage != "teacher":
            raise StageError(f"checkpoint for {kind.label} has stage {t.stage!r}, expected 'teacher'")
        if t.kind != kind.label:
            raise StageError(f"checkpoint routed to {kind.label} was trained on {t.kind!r}")
    kinds = sorted(data)
    splits = {k: data[k].split(cfg.holdout_fraction, cfg.seed) for k in kinds}
    train = {k: s[0] for k, s in splits.items()}
    held = {k: s[1] for k, s in splits.items()}
    sampler = EpochSampler({k: len(v) for k, v in train.items()}, cfg.batch_size, cfg.seed + 7)
    total = _total_iterations(cfg, sampler.steps_per_epoch)
    schedule = L.WeightSchedule(cfg.weights.alpha1, cfg.alpha1_decay)

    with deterministic_mode(cfg, 10):
        teacher_nets = {k: _frozen(teachers[k].build_backbone()) for k in kinds}
        phi, phi_feat = _phi_modules(cfg)
        student = init_backbone(cfg.backbone, cfg.seed + 17)
        opt = _adam(student.parameters(), cfg)
        start = _maybe_resume(resume, cfg, "kt", force)
        if resume is not None:
            student.load_state_dict(resume.backbone)
            opt.load_state_dict(resume.optimizer)
        trainlog = TrainLog(["loss_pixel", "loss_fg", "loss_ig", "loss_m", "loss_kt", "alpha1"], log_path)

        def snapshot(iteration):
            return Checkpoint(
                stage="kt", epoch=sampler.epoch_of(iteration), iteration=iteration,
                backbone=_state(student), backbone_config=cfg.backbone.__dict__.copy(),
                config_hash=cfg.config_hash(), config=cfg.to_dict(), optimizer=opt.state_dict(),
                rng_state=_rng_state(sampler.seed), log_tail=trainlog.tail(),
                extra={"teacher_hashes": {k.label: teachers[k].config_hash for k in kinds}})

        student.train()
        for it in range(start, total):
            epoch = sampler.epoch_of(it)
            alpha1 = schedule.value(epoch)
            batch = make_mixed_batch(train, cfg.batch_size, sampler.batch_rng(it), cfg.patch_size,
                                     indices=sampler.indices(it))
            x = _tensor(batch.images)
            kinds_t = torch.from_numpy(batch.kinds)

            with torch.no_grad():
                t_restored = torch.empty_like(x)
                t_feat = None
                for kind in kinds:
                    sel = kinds_t == int(kind)
                    out = teacher_nets[kind](x[sel])
                    t_restored[sel] = out.restored
                    f = out.features[0]
                    if t_feat is None:
                        t_feat = x.new_empty((len(x), *f.shape[1:]))
                    t_feat[sel] = f
                phi_teacher = phi(t_restored)
                phi_degraded = phi(x)

            s_out = student(x)
            l_pixel = L.pixel_l1(s_out.restored, t_restored)
            terms = L.mgcl(
                _feature_vectors(s_out.features[0], phi_feat), _feature_vectors(t_feat, phi_feat),
                phi(s_out.restored), phi_teacher, phi_degraded,
                alpha1=alpha1, tau=cfg.tau, kinds=batch.kinds, negatives=cfg.negatives)
            loss = L.kt_total(l_pixel, terms.total, cfg.weights.alpha2)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if it % cfg.log_every == 0 or it == total - 1:
                trainlog.append(it, epoch, {
                    "loss_pixel": l_pixel.item(), "loss_fg": terms.feature.item(),
                    "loss_ig": terms.image.item(), "loss_m": terms.total.item(),
                    "loss_kt": loss.item(), "alpha1": alpha1})
            if epoch_checkpoint_path and (it + 1) % sampler.steps_per_epoch == 0:
                save_checkpoint(snapshot(it + 1), epoch_checkpoint_path)
        _check_finite_params(student, "knowledge transfer")

        ckpt = snapshot(total)
        report = {}
        for kind in kinds:
            if len(held[kind]):
                report[kind.label] = heldout_psnr(student, held[kind])
                report[kind.label]["teacher"] = heldout_psnr(teacher_nets[kind], held[kind])["restored"]
        ckpt.extra["heldout_psnr"] = report
        ckpt.extra["log"] = trainlog.tail(len(trainlog.records))
    return _finish(ckpt, out_path)


# --------------------------------------------------------------------------
# domain adaptation
# --------------------------------------------------------------------------

def train_da(student: Checkpoint, data: UnpairedDataset, cfg: TrainConfig, out_path=None, log_path=None,
             resume: Checkpoint | None = None, force: bool = False,
             epoch_checkpoint_path=None) -> Checkpoint:
    """Adversarial fine-tuning of the KT student on unpaired real images.

    Per step the discriminator is updated first with the least-squares loss,
    then the student with ``L_G + lambda2 * L_idt + lambda3 * L_em``.
    """
    if student.stage != "kt":
        raise StageError(f"domain adaptation needs a 'kt' student checkpoint, got stage {student.stage!r}")
    if not data.clear.paths:
        raise ValueError("domain adaptation needs real clear images")
    data.validate()
    kinds = sorted(data.degraded)
    train, held = data.split(cfg.holdout_fraction, cfg.seed)
    sampler = EpochSampler({k: len(v) for k, v in train.degraded.items()}, cfg.batch_size, cfg.seed + 29)
    total = _total_iterations(cfg, sampler.steps_per_epoch)
    schedule = L.WeightSchedule(cfg.weights.lambda1, cfg.lambda1_decay)

    with deterministic_mode(cfg, 20):
        net = student.build_backbone()
        disc = init_discriminator(cfg.discriminator, cfg.seed + 31)
        phi, phi_feat = _phi_modules(cfg)
        opt_g = _adam(net.parameters(), cfg)
        opt_d = _adam(disc.parameters(), cfg)
        start = _maybe_resume(resume, cfg, "da", force)
        if resume is not None:
            net.load_state_dict(resume.backbone)
            disc.load_state_dict(resume.discriminator)
            opt_g.load_state_dict(resume.optimizer)
            opt_d.load_state_dict(resume.discriminator_optimizer)
        trainlog = TrainLog(["loss_d", "loss_g", "loss_idt", "loss_efg", "loss_eig", "loss_em",
                             "loss_da", "lambda1"], log_path)

        def snapshot(iteration):
            return Checkpoint(
                stage="da", epoch=sampler.epoch_of(iteration), iteration=iteration,
                backbone=_state(net), backbone_config=dict(student.backbone_config),
                discriminator=_state(disc), discriminator_config=cfg.discriminator.__dict__.copy(),
                config_hash=cfg.config_hash(), config=cfg.to_dict(),
                optimizer=opt_g.state_dict(), discriminator_optimizer=opt_d.state_dict(),
                rng_state=_rng_state(sampler.seed), log_tail=trainlog.tail(),
                extra={"student_hash": student.config_hash})

        net.train()
        disc.train()
        for it in range(start, total):
            epoch = sampler.epoch_of(it)
            lambda1 = schedule.value(epoch)
            batch = make_mixed_batch(train.degraded, cfg.batch_size, sampler.batch_rng(it), cfg.patch_size,
                                     indices=sampler.indices(it), clear=train.clear)
            x_r, x_c = _tensor(batch.images), _tensor(batch.clear_images)

            out_r = net(x_r)
            out_c = net(x_c)
            real = x_c if cfg.gan_real_input == "clear" else out_c.restored.detach()

            # discriminator step
            for p in disc.parameters():
                p.requires_grad_(True)
            loss_d = L.discriminator_loss(disc(out_r.restored.detach()), disc(real))
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            # student step
            for p in disc.parameters():
                p.requires_grad_(False)
            loss_g = L.generator_loss(disc(out_r.restored))
            loss_idt = L.identity_loss(out_c.restored, x_c)
            with torch.no_grad():
                phi_inputs = phi(x_r)
            terms = L.ex_mgcl(
                _feature_vectors(out_r.features[0], phi_feat), _feature_vectors(out_c.features[0], phi_feat),
                phi(out_r.restored), phi(out_c.restored), phi_inputs,
                lambda1=lambda1, tau=cfg.tau, kinds=batch.kinds, negatives=cfg.negatives)
            loss = L.da_total(loss_g, loss_idt, terms.total, cfg.weights.lambda2, cfg.weights.lambda3)
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_g.step()

            if it % cfg.log_every == 0 or it == total - 1:
                trainlog.append(it, epoch, {
                    "loss_d": loss_d.item(), "loss_g": loss_g.item(), "loss_idt": loss_idt.item(),
                    "loss_efg": terms.feature.item(), "loss_eig": terms.image.item(),
                    "loss_em": terms.total.item(), "loss_da": loss.item(), "lambda1": lambda1})
            if epoch_checkpoint_path and (it + 1) % sampler.steps_per_epoch == 0:
                save_checkpoint(snapshot(it + 1), epoch_checkpoint_path)
        _check_finite_params(net, "domain adaptation")
        _check_finite_params(disc, "domain adaptation")

        ckpt = snapshot(total)
        ckpt.extra["log"] = trainlog.tail(len(trainlog.records))
        ckpt.extra["heldout_split"] = {
            "degraded": {k.label: [str(p) for p in held.degraded[k].paths] for k in kinds},
            "clear": [str(p) for p in held.clear.paths]}
    return _finish(ckpt, out_path)


def student_from_checkpoint(ckpt: Checkpoint) -> Backbone:
    return _frozen(ckpt.build_backbone())
