"""Optimization loop, plateau learning-rate decay, checkpoints and the ablation suite."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import rotate_about_optical_axis
from .data import Manifest, PoseDataset
from .evaluation import ABLATION_COLUMNS, format_ablation, metrics_from_arrays
from .losses import LossBreakdown, center_loss, compose_losses, position_loss, rotation_loss
from .network import (ModelConfig, PoseModel, PretrainedWeightsUnavailable, TranslationOutput,
                      build_model, forward_pose, forward_translation)

log = logging.getLogger(__name__)

REGIMES = ("translation_only", "pose_decoupled", "pose_end_to_end")
CKPT_FORMAT = "spacepose-ckpt/1"


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    min_lr_fraction: float = 1.0 / 64
    max_epochs: int = 100
    seed: int = 0
    regime: str = "translation_only"
    cda_enabled: bool = False
    cda_r: float = 0.15
    lam: float = 1.0
    sigma2: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    deterministic: bool = True
    freeze_translation: bool = False
    translation_init: str | None = None
    rotation_aug: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.cda_enabled and not self.cda_r > 0:
            raise ConfigError("cda_r must be positive when CDA is enabled")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class PlateauDecay:
    """Multiply the learning rate by ``factor`` after ``patience`` consecutive
    epochs whose metric fails to beat the best value by a relative ``min_delta``."""

    def __init__(self, optimizer, factor=0.5, patience=5, min_delta=1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; return True if the learning rate was decayed."""
        threshold = self.best * (1.0 - self.min_delta) if self.best > 0 else self.best
        if metric < threshold:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False

    def state_dict(self) -> dict:
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict):
        self.best = state["best"]
        self.bad_epochs = state["bad_epochs"]


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: PoseModel, train_cfg: TrainConfig | None = None, optimizer=None,
                    scheduler: PlateauDecay | None = None, epoch: int = 0, best_val: float = math.inf,
                    history: list | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CKPT_FORMAT,
        "model_config": model.cfg.to_dict(),
        "train_config": None if train_cfg is None else train_cfg.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "scheduler_state": None if scheduler is None else scheduler.state_dict(),
        "epoch": epoch,
        "best_val": best_val,
        "history": history or [],
        "torch_rng_state": torch.get_rng_state(),
    }, path)
    return path


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CKPT_FORMAT:
        raise TrainingError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    return ckpt


def model_from_checkpoint(path) -> tuple[PoseModel, dict]:
    ckpt = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    cfg.position_init = cfg.orientation_init = "random"  # weights come from the checkpoint
    model = build_model(cfg)
    model.load_state_dict(ckpt["model_state"])
    model.cfg = ModelConfig.from_dict(ckpt["model_config"])
    model.eval()
    return model, ckpt


def load_translation_weights(model: PoseModel, path):
    ckpt = load_checkpoint(path)
    state = {k[len("translation."):]: v for k, v in ckpt["model_state"].items() if k.startswith("translation.")}
    model.translation.load_state_dict(state)


# --------------------------------------------------------------------------- prediction


@torch.no_grad()
def predict_dataset(model: PoseModel, ds: PoseDataset, batch_size: int = 32, with_rotation: bool = True):
    """Eval-mode predictions ``(t, q or None, boxes)`` as tensors over the whole dataset."""
    was_training = model.training
    model.eval()
    ts, qs, boxes = [], [], []
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(start + batch_size, len(ds))))
        images, originals, *_ = ds.batch(idx)
        if with_rotation:
            t, q, _, b = forward_pose(model, images, originals, mode="eval")
            qs.append(q)
        else:
            out = forward_translation(model, images)
            t, b = out.t_pred, None
        ts.append(t)
        if b is not None:
            boxes.append(b)
    model.train(was_training)
    return torch.cat(ts), (torch.cat(qs) if qs else None), (torch.cat(boxes) if boxes else None)


# --------------------------------------------------------------------------- training


def _check_regime(model: PoseModel, cfg: TrainConfig):
    if cfg.regime == "pose_end_to_end" and not model.cfg.hc_enabled:
        raise ConfigError("pose_end_to_end training requires heatmap concatenation (hc_enabled)")
    if cfg.regime == "pose_decoupled" and model.cfg.hc_enabled:
        raise ConfigError("pose_decoupled training requires hc_enabled=False")
    if cfg.freeze_translation and cfg.regime != "pose_decoupled":
        raise ConfigError("freeze_translation only applies to the pose_decoupled regime")


def _objective(cfg: TrainConfig, parts: LossBreakdown) -> float:
    if cfg.regime == "translation_only":
        return parts.translation
    return parts.rotation if cfg.freeze_translation else parts.pose


class _Trainer:
    def __init__(self, model: PoseModel, train_ds: PoseDataset, val_ds: PoseDataset, cfg: TrainConfig):
        self.model, self.train_ds, self.val_ds, self.cfg = model, train_ds, val_ds, cfg
        self.frozen = cfg.freeze_translation
        if cfg.regime == "translation_only":
            params = list(model.translation.parameters())
        elif self.frozen:
            params = list(model.orientation.parameters())
            for p in model.translation.parameters():
                p.requires_grad_(False)
        else:
            params = list(model.parameters())
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        self.scheduler = PlateauDecay(self.optimizer, cfg.plateau_factor, cfg.plateau_patience,
                                      cfg.plateau_min_delta)
        self._cache = {}

    def _frozen_outputs(self, ds: PoseDataset):
        """Translation outputs of a frozen module are fixed; compute them once."""
        key = id(ds)
        if key not in self._cache:
            self.model.translation.eval()
            outs = []
            with torch.no_grad():
                for start in range(0, len(ds), 64):
                    images = ds.images[start:start + 64]
                    outs.append(forward_translation(self.model, images))
            self._cache[key] = outs
        return self._cache[key]

    def _cached_translation(self, ds, idx):
        outs = self._frozen_outputs(ds)
        rows = [(i // 64, i % 64) for i in idx]
        pick = lambda name: torch.stack([getattr(outs[b], name)[j] for b, j in rows])  # noqa: E731
        return TranslationOutput(pick("t_pred"), torch.empty(0), pick("heatmap"), pick("center_pred"))

    def step_losses(self, ds: PoseDataset, idx, train: bool, rng=None, aug_rng=None):
        cfg = self.cfg
        images, originals, t, c, q = ds.batch(idx)
        angles = None
        if train and cfg.rotation_aug and cfg.regime != "translation_only":
            angles = torch.as_tensor(aug_rng.uniform(-np.pi, np.pi, size=len(idx)), dtype=q.dtype)
            q = rotate_about_optical_axis(q, angles)
        if cfg.regime == "translation_only":
            out = forward_translation(self.model, images)
            q_pred = None
        else:
            cached = self._cached_translation(ds, idx) if self.frozen else None
            cda = cfg.cda_r if (train and cfg.cda_enabled) else None
            _, q_pred, out, _ = forward_pose(self.model, images, originals, mode="train" if train else "eval",
                                             cda_r=cda, rng=rng, translation=cached, roi_angles=angles)
        pos = position_loss(t, out.t_pred)
        euc, reg, cen = center_loss(c, out.center_pred, out.heatmap, cfg.sigma2, cfg.lam)
        rot = rotation_loss(q, q_pred) if q_pred is not None else torch.zeros(())
        total = pos + cen + rot if not self.frozen else rot
        return total, dict(position=pos, euc=euc, reg=reg, center=cen, rotation=rot), out, q_pred

    def set_modes(self, train: bool):
        self.model.train(train)
        if self.frozen:
            self.model.translation.eval()

    def train_epoch(self, epoch: int) -> LossBreakdown:
        cfg = self.cfg
        self.set_modes(True)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(self.train_ds))
        cda_rng = np.random.default_rng([cfg.seed, epoch, 1])
        aug_rng = np.random.default_rng([cfg.seed, epoch, 2])
        sums, count = {}, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size].tolist()
            total, parts, _, _ = self.step_losses(self.train_ds, idx, True, cda_rng, aug_rng)
            try:
                compose_losses(**parts)
            except FloatingPointError as e:
                raise TrainingError(f"epoch {epoch} batch {b}: {e}") from e
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            n = len(idx)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * n
            count += n
        return compose_losses(**{k: v / count for k, v in sums.items()})

    @torch.no_grad()
    def validate(self):
        cfg = self.cfg
        self.set_modes(False)
        sums, ts, qs = {}, [], []
        for start in range(0, len(self.val_ds), cfg.batch_size):
            idx = list(range(start, min(start + cfg.batch_size, len(self.val_ds))))
            _, parts, out, q_pred = self.step_losses(self.val_ds, idx, False)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
            ts.append(out.t_pred)
            if q_pred is not None:
                qs.append(q_pred)
        parts = compose_losses(**{k: v / len(self.val_ds) for k, v in sums.items()})
        report = metrics_from_arrays(torch.cat(ts), self.val_ds.t,
                                     torch.cat(qs) if qs else None, self.val_ds.q if qs else None)
        return parts, report


def _history_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True)


def train(model: PoseModel, train_manifest: Manifest, val_manifest: Manifest, cfg: TrainConfig,
          run_dir=None, resume=None, datasets: tuple[PoseDataset, PoseDataset] | None = None):
    """Train ``model`` under ``cfg.regime`` and return ``(best checkpoint path, history)``.

    Files written to ``run_dir``: ``config.json``, ``history.jsonl`` (one epoch
    per line), ``last.ckpt`` and ``best.ckpt`` (lowest validation objective).
    Training stops at ``max_epochs`` or once the learning rate has decayed
    below ``lr * min_lr_fraction``. ``resume`` continues from a ``last.ckpt``.
    """
    _check_regime(model, cfg)
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise TrainingError("training and validation manifests must be non-empty")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    if datasets is None:
        datasets = (PoseDataset(train_manifest, model.cfg.input_size),
                    PoseDataset(val_manifest, model.cfg.input_size))
    train_ds, val_ds = datasets

    history, start_epoch, best_val = [], 1, math.inf
    if resume is None:
        if cfg.translation_init:
            load_translation_weights(model, cfg.translation_init)
        elif cfg.regime != "pose_decoupled" or not cfg.freeze_translation:
            model.set_translation_stats(train_ds.t.mean(0), train_ds.t.std(0))
    trainer = _Trainer(model, train_ds, val_ds, cfg)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model_state"])
        trainer.optimizer.load_state_dict(ckpt["optimizer_state"])
        trainer.scheduler.load_state_dict(ckpt["scheduler_state"])
        history = list(ckpt["history"])
        start_epoch = ckpt["epoch"] + 1
        best_val = ckpt["best_val"]
        torch.set_rng_state(ckpt["torch_rng_state"])

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"model": model.cfg.to_dict(), "train": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
        (run_dir / "history.jsonl").write_text("".join(_history_line(h) + "\n" for h in history))

    best_path = None if run_dir is None else run_dir / "best.ckpt"
    min_lr = cfg.lr * cfg.min_lr_fraction
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        if trainer.scheduler.lr < min_lr:
            break
        lr = trainer.scheduler.lr
        train_parts = trainer.train_epoch(epoch)
        val_parts, report = trainer.validate()
        objective = _objective(cfg, val_parts)
        decayed = trainer.scheduler.step(objective)
        entry = {"epoch": epoch, "lr": lr, "train": train_parts.to_dict(), "val": val_parts.to_dict(),
                 "val_metrics": report.to_json(), "objective": objective,
                 "train_objective": _objective(cfg, train_parts), "lr_decayed": decayed}
        history.append(entry)
        log.info("epoch %d lr %.2e train %.4f val %.4f E_t %.3f E_q %s", epoch, lr,
                 entry["train_objective"], objective, report.E_t_mean,
                 "n/a" if report.E_q_mean is None else f"{report.E_q_mean:.1f}")
        improved = objective < best_val
        if improved:
            best_val = objective
        if run_dir is not None:
            with open(run_dir / "history.jsonl", "a") as fh:
                fh.write(_history_line(entry) + "\n")
            save_checkpoint(run_dir / "last.ckpt", model, cfg, trainer.optimizer, trainer.scheduler,
                            epoch, best_val, history)
            if improved:
                save_checkpoint(best_path, model, cfg, trainer.optimizer, trainer.scheduler,
                                epoch, best_val, history)
    for p in model.parameters():
        p.requires_grad_(True)
    return best_path, history


# --------------------------------------------------------------------------- ablation

ABLATION_ROWS = [
    ("random", False, False),
    ("pretrained", False, False),
    ("random", True, False),
    ("pretrained", True, False),
    ("pretrained", False, True),
    ("random", True, True),
]
INIT_LABELS = {"random": "Random", "pretrained": "ImageNet"}


def ablation_suite(model_cfg: ModelConfig, train_cfg: TrainConfig, train_manifest: Manifest,
                   val_manifest: Manifest, out_dir, translation_epochs: int | None = None,
                   pose_epochs: int | None = None, warm_start_hc: bool = False) -> dict:
    """Run the six initialization x HC x CDA configurations.

    The HC-off rows share one translation checkpoint trained first; their
    orientation networks are trained on its frozen predictions. HC-on rows are
    trained end to end (cold start unless ``warm_start_hc``). Rows needing
    pretrained weights that are not available are reported with empty metrics
    and a note rather than silently falling back to random initialization.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = ModelConfig.from_dict({**model_cfg.to_dict(), "hc_enabled": False,
                                  "position_init": model_cfg.position_init, "orientation_init": "random"})
    t_epochs = translation_epochs or train_cfg.max_epochs
    p_epochs = pose_epochs or train_cfg.max_epochs
    datasets = (PoseDataset(train_manifest, base.input_size), PoseDataset(val_manifest, base.input_size))

    tr_cfg = TrainConfig(**{**train_cfg.to_dict(), "regime": "translation_only", "max_epochs": t_epochs,
                            "cda_enabled": False, "freeze_translation": False, "translation_init": None})
    translation_ckpt, _ = train(build_model(base, train_cfg.seed), train_manifest, val_manifest, tr_cfg,
                                out_dir / "translation", datasets=datasets)

    rows, notes = [], {}
    for i, (init, hc, cda) in enumerate(ABLATION_ROWS):
        name = f"row{i + 1}_{init}_hc{int(hc)}_cda{int(cda)}"
        row = {"init": INIT_LABELS[init], "HC": hc, "CDA": cda}
        mcfg = ModelConfig.from_dict({**base.to_dict(), "hc_enabled": hc, "orientation_init": init})
        try:
            model = build_model(mcfg, train_cfg.seed)
        except PretrainedWeightsUnavailable as e:
            notes[name] = f"not run: {e}"
            rows.append({**row, "E_t_mean": None, "E_t_std": None, "E_q_mean_deg": None, "E_q_std_deg": None})
            continue
        if hc:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "regime": "pose_end_to_end", "max_epochs": p_epochs,
                                 "cda_enabled": cda, "freeze_translation": False,
                                 "translation_init": str(translation_ckpt) if warm_start_hc else None})
        else:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "regime": "pose_decoupled", "max_epochs": p_epochs,
                                 "cda_enabled": cda, "freeze_translation": True,
                                 "translation_init": str(translation_ckpt)})
        best, _ = train(model, train_manifest, val_manifest, cfg, out_dir / name, datasets=datasets)
        best_model, _ = model_from_checkpoint(best)
        t, q, _ = predict_dataset(best_model, datasets[1])
        report = metrics_from_arrays(t, datasets[1].t, q, datasets[1].q)
        rows.append({**row, "E_t_mean": report.E_t_mean, "E_t_std": report.E_t_std,
                     "E_q_mean_deg": report.E_q_mean, "E_q_std_deg": report.E_q_std})
        notes[name] = f"checkpoint {best}"
    table = {"columns": ABLATION_COLUMNS, "rows": rows, "notes": notes,
             "translation_checkpoint": str(translation_ckpt), "std_kind": "population"}
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    (out_dir / "ablation.txt").write_text(format_ablation(rows))
    return table
