"""BCE heatmap loss, Adam with a triangular cyclic rate, training and transfer."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .datasets import DatasetManifest, mixed_sampler, prepare_split
from .metrics import EvalReport, evaluate_domain
from .model import DATR, PRESETS, DomainSpec, ModelConfig, gaussian_targets, rescale_coords
from .numerics import ContractError, DimensionError, NumericError, Tensor, _make, as_tensor, backward, no_grad
from .params import SHARED, namespace_of

__all__ = [
    "TrainConfig", "bce_loss", "cyclic_lr", "Adam", "adam_step", "Trainer", "train",
    "transfer", "evaluate", "predict_landmarks", "DivergenceError",
]

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


class DivergenceError(NumericError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr_low: float = 1e-4
    lr_high: float = 5e-3
    cycle_steps: int | None = None  # default: two epochs of steps
    max_steps: int | None = None
    seed: int = 0
    sigma: float = 3.0
    input_size: int = 64
    preset: str = "toy"
    aux_guidance: bool = False
    aux_weight: float = 1.0
    uniform_sampling: bool = False
    normalize_peak: bool = False

    def __post_init__(self):
        if not self.lr_low < self.lr_high:
            raise ContractError("lr_low must be below lr_high")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (batch norm needs two samples)")

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(epochs=100, batch_size=8, lr_low=1e-4, lr_high=5e-3, sigma=3.0,
                   input_size=512, preset="paper")

    def model_config(self) -> ModelConfig:
        cfg = PRESETS[self.preset]()
        if cfg.input_size != self.input_size:
            cfg = dataclasses.replace(cfg, input_size=self.input_size)
        return cfg


def bce_loss(pred, target) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise DimensionError(f"bce_loss shape mismatch: {pred.shape} vs {t.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    value = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1 - BCE_CLAMP)

    def _bw(g):
        return (g * inside * (p - t) / (p * (1 - p)) / n,)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), _bw)


def cyclic_lr(step: int, config: TrainConfig | None = None, *, low: float | None = None,
              high: float | None = None, period: int | None = None) -> float:
    """Triangular wave: ``low`` at step 0, ``high`` at half a period."""
    if step < 0:
        raise ValueError("step must be >= 0")
    low = low if low is not None else config.lr_low
    high = high if high is not None else config.lr_high
    period = period if period is not None else (config.cycle_steps or 2)
    half = period / 2
    pos = step % period
    frac = pos / half if pos <= half else (period - pos) / half
    return low + (high - low) * frac


class Adam:
    """Adam with per-parameter step counters (parameters may skip steps)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params, names: Sequence[str], lr: float) -> None:
        for name in names:
            p = params[name]
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
            adam_step(p, g, self, name, lr)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
            out[f"t/{k}"] = np.array(self.t[k], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                self.m[name] = np.array(value)
            elif kind == "v":
                self.v[name] = np.array(value)
            elif kind == "t":
                self.t[name] = int(value)


def adam_step(param: Tensor, grad: np.ndarray, state: Adam, name: str, lr: float) -> None:
    b1, b2 = state.beta1, state.beta2
    m = state.m.get(name)
    if m is None:
        m = np.zeros_like(param.data)
        state.v[name] = np.zeros_like(param.data)
        state.t[name] = 0
    t = state.t[name] + 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * state.v[name] + (1 - b2) * grad * grad
    state.m[name], state.v[name], state.t[name] = m, v, t
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


@dataclass
class _DomainData:
    spec: DomainSpec
    images: np.ndarray
    coords: np.ndarray
    targets: np.ndarray
    val_images: np.ndarray
    val_targets: np.ndarray


class Trainer:
    """Owns a model, its optimiser and the per-domain training arrays."""

    def __init__(self, model: DATR, config: TrainConfig, manifests: Sequence[DatasetManifest],
                 trainable: Callable[[str], bool] | None = None, bn_mode: str = "train"):
        self.model, self.config = model, config
        self.manifests = list(manifests)
        self.optimizer = Adam()
        self.trainable = trainable or (lambda ns: True)
        self.bn_mode = bn_mode
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.best: dict | None = None
        self.data: dict[str, _DomainData] = {}
        S = model.config.input_size
        dtype = model.store.values().__iter__().__next__().dtype
        for m in self.manifests:
            model.check_domain(m.name)
            if not m["train"]:
                raise ContractError(f"domain {m.name!r} has an empty train split")
            imgs, coords, _ = prepare_split(m["train"], S)
            vimgs, vcoords, _ = prepare_split(m["val"], S)
            self.data[m.name] = _DomainData(
                m.spec, imgs.astype(dtype), coords,
                gaussian_targets(coords, S, S, config.sigma, config.normalize_peak, dtype),
                vimgs.astype(dtype),
                gaussian_targets(vcoords, S, S, config.sigma, config.normalize_peak, dtype) if len(vimgs) else vimgs,
            )
        steps_per_epoch = sum(
            len(list(range(0, len(d.images), config.batch_size))) for d in self.data.values())
        self.cycle_steps = config.cycle_steps or max(2, 2 * steps_per_epoch)

    def lr(self, step: int) -> float:
        return cyclic_lr(step, low=self.config.lr_low, high=self.config.lr_high, period=self.cycle_steps)

    def loss(self, images, targets, domain: str, mode: str) -> Tensor:
        fused, _, guide = self.model.forward(images, domain, mode)
        loss = bce_loss(fused, targets)
        if self.config.aux_guidance and guide is not None:
            loss = loss + self.config.aux_weight * bce_loss(guide, targets)
        return loss

    def update_names(self, domain: str) -> list[str]:
        allowed = {SHARED, f"domain/{domain}"}
        return [n for n in self.model.store.keys()
                if namespace_of(n) in allowed and self.trainable(namespace_of(n))]

    def train_step(self, domain: str, index: Sequence[int]) -> float:
        d = self.data[domain]
        store = self.model.store
        store.zero_grad()
        loss = self.loss(d.images[index], d.targets[index], domain, self.bn_mode)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(self.step)
        backward(loss, store)
        lr = self.lr(self.step)
        try:
            self.optimizer.step(store, self.update_names(domain), lr)
        except NumericError as exc:
            raise DivergenceError(self.step, str(exc)) from None
        self.step += 1
        return value

    def validation_loss(self) -> dict[str, float]:
        out = {}
        with no_grad():
            for name, d in self.data.items():
                if not len(d.val_images):
                    continue
                total = 0.0
                bs = self.config.batch_size
                for s in range(0, len(d.val_images), bs):
                    loss = self.loss(d.val_images[s:s + bs], d.val_targets[s:s + bs], name, "eval")
                    total += float(loss.data) * len(d.val_images[s:s + bs])
                out[name] = total / len(d.val_images)
        return out

    def run_epoch(self) -> dict:
        cfg = self.config
        losses = []
        lr_start = self.lr(self.step)
        batches = mixed_sampler(self.manifests, cfg.batch_size, [cfg.seed, self.epoch],
                                uniform=cfg.uniform_sampling)
        for domain, index in batches:
            if cfg.max_steps is not None and self.step >= cfg.max_steps:
                break
            losses.append(self.train_step(domain, index))
        val = self.validation_loss()
        total = float(np.mean(list(val.values()))) if val else float(np.mean(losses))
        row = {"epoch": self.epoch, "lr": lr_start, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": val, "val_total": total, "steps": self.step, "step_losses": losses}
        self.history.append(row)
        if self.best is None or total < self.best["val_total"]:
            self.best = {"val_total": total, "epoch": self.epoch, "step": self.step,
                         "params": self.model.store.snapshot(), "bn": self._bn_snapshot()}
        self.epoch += 1
        log.info("epoch %d step %d lr %.2e train %.5f val %.5f", row["epoch"], self.step,
                 lr_start, row["train_loss"], total)
        return row

    def _bn_snapshot(self) -> dict:
        return {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in self.model.store.buffers.items()}

    def restore_best(self) -> None:
        if self.best is None:
            return
        self.model.store.load_values(self.best["params"])
        for k, (mu, var) in self.best["bn"].items():
            self.model.store.buffers[k].running_mean = mu.copy()
            self.model.store.buffers[k].running_var = var.copy()

    def fit(self, on_epoch: Callable[["Trainer", dict], None] | None = None) -> None:
        cfg = self.config
        while self.epoch < cfg.epochs:
            if cfg.max_steps is not None and self.step >= cfg.max_steps:
                break
            row = self.run_epoch()
            if on_epoch:
                on_epoch(self, row)

    def meta(self) -> dict:
        return {
            "epoch": self.epoch, "step": self.step,
            "best_val_loss": None if self.best is None else self.best["val_total"],
            "best_epoch": None if self.best is None else self.best["epoch"],
            "history": [{k: v for k, v in r.items()} for r in self.history],
            "train_config": dataclasses.asdict(self.config),
        }

    def checkpoint(self, domains: Sequence[DomainSpec], best: bool = True) -> Checkpoint:
        """Snapshot as a checkpoint (the minimum-validation-loss weights by default)."""
        current = None
        if best and self.best is not None:
            current = (self.model.store.snapshot(), self._bn_snapshot())
            self.restore_best()
        ckpt = Checkpoint.from_model(self.model, list(domains), self.optimizer.state_dict(), self.meta())
        if current is not None:
            self.model.store.load_values(current[0])
            for k, (mu, var) in current[1].items():
                self.model.store.buffers[k].running_mean = mu
                self.model.store.buffers[k].running_var = var
        return ckpt

    def resume_from(self, last: Checkpoint, best: Checkpoint | None = None) -> None:
        """Continue from ``last`` (current weights + optimiser state).

        The model must already hold ``last``'s weights. ``best`` restores the
        selection record so that min-validation-loss tracking carries over.
        """
        self.optimizer.load_state_dict(last.optimizer)
        self.step = int(last.meta.get("step", 0))
        self.epoch = int(last.meta.get("epoch", 0))
        self.history = list(last.meta.get("history", []))
        if best is not None and last.meta.get("best_val_loss") is not None:
            bn = {}
            for k in self.model.store.buffers:
                bn[k] = (best.bn_stats[f"{k}/running_mean"], best.bn_stats[f"{k}/running_var"])
            self.best = {"val_total": last.meta["best_val_loss"], "epoch": last.meta.get("best_epoch"),
                         "step": None, "params": {k: v.copy() for k, v in best.params.items()}, "bn": bn}


def train(config: TrainConfig, manifests: Sequence[DatasetManifest], model: DATR | None = None,
          on_epoch=None) -> tuple[Checkpoint, Trainer]:
    """Multi-domain training; returns the minimum-validation-loss checkpoint and the trainer."""
    if not manifests:
        raise ContractError("train needs at least one dataset")
    for m in manifests:
        if not m["train"] or not m["val"]:
            raise ContractError(f"domain {m.name!r} needs non-empty train and val splits")
    if model is None:
        model = DATR(config.model_config(), [m.spec for m in manifests], seed=config.seed)
    trainer = Trainer(model, config, manifests)
    trainer.fit(on_epoch)
    return trainer.checkpoint([m.spec for m in manifests]), trainer


def transfer(checkpoint: Checkpoint, new_spec: DomainSpec, manifest: DatasetManifest,
             config: TrainConfig, donor: str | None = None, on_epoch=None) -> tuple[Checkpoint, Trainer]:
    """Add a domain to a trained model and train only its parameters.

    Every shared parameter and the batch-norm running statistics stay frozen;
    the new domain's tensors start as copies of ``donor`` (default: the first
    registered domain) wherever shapes agree.
    """
    if any(d.name == new_spec.name for d in checkpoint.domains):
        raise ValueError(f"domain {new_spec.name!r} already exists in the checkpoint")
    model = checkpoint.build_model()
    donor = donor or checkpoint.domains[0].name
    model.register_domain(new_spec.name, new_spec.num_landmarks, donor=donor)
    target_ns = f"domain/{new_spec.name}"
    trainer = Trainer(model, config, [manifest], trainable=lambda ns: ns == target_ns, bn_mode="eval")
    trainer.fit(on_epoch)
    return trainer.checkpoint([*checkpoint.domains, new_spec]), trainer


def predict_landmarks(model: DATR, manifest_samples, domain: str, input_size: int | None = None) -> list[np.ndarray]:
    """Predicted coordinates per sample, mapped back to each sample's original geometry."""
    S = input_size or model.config.input_size
    images, _, geoms = prepare_split(manifest_samples, S)
    dtype = next(iter(model.store.values())).dtype
    coords = model.predict(images.astype(dtype), domain) if len(images) else np.zeros((0, 0, 2))
    return [rescale_coords(c, (S, S), g) for c, g in zip(coords, geoms)]


def evaluate(model: DATR, manifests: Sequence[DatasetManifest], split: str = "test") -> EvalReport:
    report = EvalReport()
    for m in manifests:
        model.check_domain(m.name)
        samples = m[split]
        if not samples:
            continue
        preds = predict_landmarks(model, samples, m.name)
        report.domains.append(evaluate_domain(m.spec, preds, [s.landmarks for s in samples]))
    return report
