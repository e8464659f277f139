"""Conditional DRAGAN training: losses, gradient penalty, optimizer schedule, loop.

All five loss terms are in minimization form:

* adversarial, discriminator: -E[log D(x)] - E[log(1 - D(G(z, c)))]
* adversarial, generator (non-saturating): -E[log D(G(z, c))]
* classification: mean binary cross-entropy of the attribute head, on real
  images against their tags and on fakes against the sampled conditions
  (the discriminator sees both, the generator only the fake term; the
  discriminator's fake term is scaled by ``cls_fake_weight``, 1 by default)
* gradient penalty: E[(||grad_x D(x_hat)||_2 - 1)^2] at perturbed reals

    total_d = cls_d + lambda_adv * adv_d + lambda_gp * gp_d
    total_g = lambda_adv * adv_g + cls_g
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, TrainingError, ValidationError
from .nets import architecture_manifest, build_from_manifest, from_uint8_hwc
from .tagspace import LabelPrior, sample_conditions

log = logging.getLogger(__name__)

EPS = 1e-7


def _clamp(p):
    return p.clamp(EPS, 1.0 - EPS)


def adv_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    real_scores, fake_scores = torch.as_tensor(real_scores), torch.as_tensor(fake_scores)
    return -torch.log(_clamp(real_scores)).mean() - torch.log(1.0 - _clamp(fake_scores)).mean()


def adv_loss_g(fake_scores: torch.Tensor) -> torch.Tensor:
    return -torch.log(_clamp(torch.as_tensor(fake_scores))).mean()


def cls_loss(predicted: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy of attribute probabilities against hard targets.

    ``reduction="mean"`` averages over batch and attributes; ``"sum"`` sums
    over attributes and averages over the batch.
    """
    predicted, target = torch.as_tensor(predicted), torch.as_tensor(target)
    if predicted.shape != target.shape:
        raise ValidationError(f"prediction shape {tuple(predicted.shape)} != target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValidationError("classification targets must be hard 0/1 tags")
    if predicted.numel() == 0:
        return predicted.new_zeros(())
    p = _clamp(predicted)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    if reduction == "mean":
        return bce.mean()
    if reduction == "sum":
        return bce.sum(dim=1).mean()
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def perturb(real_batch: torch.Tensor, alpha: float, rng: torch.Generator | None = None) -> torch.Tensor:
    """x + alpha * std(batch) * U(0, 1), one uniform draw per element."""
    if real_batch.shape[0] < 2:
        raise ValidationError("perturbation needs a batch of at least 2")
    sigma = real_batch.std(unbiased=False)
    noise = torch.rand(real_batch.shape, generator=rng, dtype=real_batch.dtype)
    return real_batch + alpha * sigma * noise


def gradient_penalty(discriminator: Callable, perturbed_batch: torch.Tensor, target: str = "logit") -> torch.Tensor:
    """Mean squared deviation of per-example input-gradient L2 norms from 1.

    ``target="logit"`` differentiates the pre-sigmoid adversarial output,
    ``"prob"`` the post-sigmoid score.
    """
    x_hat = perturbed_batch.detach().requires_grad_(True)
    out = discriminator(x_hat)
    adv = out[0] if isinstance(out, tuple) else out
    if target == "prob":
        adv = torch.sigmoid(adv)
    elif target != "logit":
        raise ConfigurationError(f"unknown penalty target {target!r}")
    (grad,) = torch.autograd.grad(adv.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    if not torch.all(torch.isfinite(norms)):
        raise TrainingError("non-finite discriminator gradient in penalty")
    return ((norms - 1.0) ** 2).mean()


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 34.0
    lambda_gp: float = 0.5

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_gp < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBundle:
    adv_d: float
    cls_d: float
    gp_d: float
    adv_g: float
    cls_g: float
    total_d: float
    total_g: float

    @classmethod
    def compose(cls, weights: LossWeights, adv_d, cls_d, gp_d, adv_g, cls_g) -> "LossBundle":
        return cls(
            adv_d, cls_d, gp_d, adv_g, cls_g,
            total_d=cls_d + weights.lambda_adv * adv_d + weights.lambda_gp * gp_d,
            total_g=weights.lambda_adv * adv_g + cls_g,
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr_init: float = 2e-4
    lr_decay_start: int = 50_000
    lr_decay_factor: float = 0.95
    lr_decay_interval: int = 1_000
    lr_floor: float = 1e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perturb_alpha: float = 0.5
    gp_target: str = "logit"
    cls_reduction: str = "mean"
    cls_fake_weight: float = 1.0
    prior: str = "training_uniform"
    binary_prob: float = 0.25
    seed: int = 0
    steps: int = 100_000
    checkpoint_every: int = 5_000
    keep_checkpoints: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.prior not in ("training_uniform", "empirical", "none"):
            raise ConfigurationError(f"unknown prior {self.prior!r}")
        if self.gp_target not in ("logit", "prob"):
            raise ConfigurationError(f"unknown gp_target {self.gp_target!r}")
        if self.cls_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"unknown cls_reduction {self.cls_reduction!r}")
        if self.cls_fake_weight < 0:
            raise ConfigurationError("cls_fake_weight must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


def parse_config(doc: dict) -> tuple[TrainConfig, LossWeights, dict]:
    """Split a config mapping into TrainConfig, LossWeights and network manifests.

    Optional ``generator`` / ``discriminator`` sub-objects carry network
    manifests (``{"kind": ..., "spec": {...}}``) and are returned as the
    third element.
    """
    known = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(LossWeights)}
    extra = {"generator", "discriminator"}
    unknown = set(doc) - known - extra
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    weights = LossWeights(**{k: doc[k] for k in ("lambda_adv", "lambda_gp") if k in doc})
    nets = {k: doc[k] for k in extra if k in doc}
    return TrainConfig.from_dict(doc), weights, nets


def load_config(path: str | os.PathLike) -> tuple[TrainConfig, LossWeights, dict]:
    """Read a JSON config holding TrainConfig and LossWeights keys side by side."""
    return parse_config(json.loads(Path(path).read_text()))


def learning_rate(step: int, config: TrainConfig) -> float:
    """Constant until ``lr_decay_start``, then stepwise exponential decay with a floor."""
    if step < config.lr_decay_start:
        return config.lr_init
    k = (step - config.lr_decay_start) // config.lr_decay_interval
    return max(config.lr_floor, config.lr_init * config.lr_decay_factor ** k)


@dataclass
class TrainingData:
    """Real samples and their hard tags, held in memory."""

    x: torch.Tensor
    tags: torch.Tensor

    def __post_init__(self):
        if self.x.shape[0] != self.tags.shape[0]:
            raise ValidationError("data and tags must have the same length")

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_manifest(cls, manifest) -> "TrainingData":
        kept = manifest.retained
        if not kept:
            raise ConfigurationError("manifest has no retained records")
        images = np.stack([manifest.load_image(r) for r in kept])
        tags = torch.tensor([r.tags for r in kept], dtype=torch.float32)
        return cls(from_uint8_hwc(images), tags)


@dataclass
class TrainState:
    generator: nn.Module
    discriminator: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    prior: LabelPrior | None
    np_rng: np.random.Generator
    torch_rng: torch.Generator
    step: int = 0
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0

    @property
    def cond_dim(self) -> int:
        return 0 if self.prior is None else self.prior.taxonomy.total_dim

    def sample_z(self, n: int) -> torch.Tensor:
        return torch.randn(n, self.generator.spec.noise_dim, generator=self.torch_rng)

    def sample_c(self, n: int) -> torch.Tensor:
        if self.prior is None:
            return torch.zeros(n, 0)
        return torch.as_tensor(sample_conditions(self.prior, n, self.np_rng), dtype=torch.float32)

    def next_indices(self, n_data: int, batch_size: int) -> np.ndarray:
        out = []
        while len(out) < batch_size:
            if self.cursor >= len(self.order):
                self.order = self.np_rng.permutation(n_data)
                self.cursor = 0
            take = min(batch_size - len(out), len(self.order) - self.cursor)
            out.extend(self.order[self.cursor:self.cursor + take].tolist())
            self.cursor += take
        return np.asarray(out, dtype=np.int64)


def _adam(params, config: TrainConfig):
    return torch.optim.Adam(
        params, lr=config.lr_init, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps
    )


def make_prior(config: TrainConfig, data: TrainingData | None = None) -> LabelPrior | None:
    if config.prior == "none":
        return None
    if config.prior == "empirical":
        if data is None:
            raise ConfigurationError("empirical prior needs training data")
        return LabelPrior.from_tags(data.tags.numpy())
    return LabelPrior.training(config.binary_prob)


def init_state(
    generator: nn.Module,
    discriminator: nn.Module,
    config: TrainConfig,
    prior: LabelPrior | None,
) -> TrainState:
    cond = 0 if prior is None else prior.taxonomy.total_dim
    if generator.spec.cond_dim != cond or discriminator.spec.cond_dim != cond:
        raise ConfigurationError(
            f"networks condition on {generator.spec.cond_dim}/{discriminator.spec.cond_dim} "
            f"attributes but the prior has {cond}"
        )
    return TrainState(
        generator=generator,
        discriminator=discriminator,
        opt_g=_adam(generator.parameters(), config),
        opt_d=_adam(discriminator.parameters(), config),
        prior=prior,
        np_rng=np.random.default_rng(config.seed),
        torch_rng=torch.Generator().manual_seed(config.seed),
    )


def _check_finite(values: dict, step: int, where: str):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite {where} loss at step {step}: {bad}", step=step, diagnostics=values)


def train_step(
    state: TrainState,
    real_x: torch.Tensor,
    real_tags: torch.Tensor,
    config: TrainConfig,
    weights: LossWeights,
) -> LossBundle:
    """One discriminator update followed by one generator update."""
    G, D = state.generator, state.discriminator
    G.train()
    D.train()
    lr = learning_rate(state.step, config)
    for opt in (state.opt_d, state.opt_g):
        for group in opt.param_groups:
            group["lr"] = lr
    n = real_x.shape[0]
    step = state.step

    z, c = state.sample_z(n), state.sample_c(n)
    with torch.no_grad():
        fake = G(z, c)
    real_logit, real_cls = D(real_x)
    fake_logit, fake_cls = D(fake)
    adv_d = adv_loss_d(torch.sigmoid(real_logit), torch.sigmoid(fake_logit))
    cls_d = cls_loss(torch.sigmoid(real_cls), real_tags, config.cls_reduction)
    if config.cls_fake_weight:
        cls_d = cls_d + config.cls_fake_weight * cls_loss(torch.sigmoid(fake_cls), c, config.cls_reduction)
    try:
        gp_d = gradient_penalty(D, perturb(real_x, config.perturb_alpha, state.torch_rng), config.gp_target)
    except TrainingError as exc:
        raise TrainingError(str(exc) + f" (step {step})", step=step) from exc
    total_d = cls_d + weights.lambda_adv * adv_d + weights.lambda_gp * gp_d
    d_terms = {"adv_d": adv_d.item(), "cls_d": cls_d.item(), "gp_d": gp_d.item()}
    _check_finite(d_terms, step, "discriminator")
    state.opt_d.zero_grad(set_to_none=True)
    total_d.backward()
    state.opt_d.step()

    z, c = state.sample_z(n), state.sample_c(n)
    fake_logit, fake_cls = D(G(z, c))
    adv_g = adv_loss_g(torch.sigmoid(fake_logit))
    cls_g = cls_loss(torch.sigmoid(fake_cls), c, config.cls_reduction)
    total_g = weights.lambda_adv * adv_g + cls_g
    g_terms = {"adv_g": adv_g.item(), "cls_g": cls_g.item()}
    _check_finite(g_terms, step, "generator")
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)

    state.step += 1
    return LossBundle.compose(weights, **d_terms, **g_terms)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | os.PathLike, config: TrainConfig, weights: LossWeights) -> Path:
    """Write a checkpoint atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "step": state.step,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "generator_arch": architecture_manifest(state.generator),
        "discriminator_arch": architecture_manifest(state.discriminator),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "np_rng": state.np_rng.bit_generator.state,
        "torch_rng": state.torch_rng.get_state(),
        "order": state.order.tolist(),
        "cursor": state.cursor,
        "prior": None if state.prior is None else state.prior.to_dict(),
        "taxonomy_version": None if state.prior is None else state.prior.taxonomy.version,
        "taxonomy_names": None if state.prior is None else list(state.prior.taxonomy.names),
        "config": asdict(config),
        "weights": asdict(weights),
    }
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TrainState, TrainConfig, LossWeights]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    weights = LossWeights(**payload["weights"])
    G = build_from_manifest(payload["generator_arch"])
    D = build_from_manifest(payload["discriminator_arch"])
    G.load_state_dict(payload["generator"])
    D.load_state_dict(payload["discriminator"])
    prior = None if payload["prior"] is None else LabelPrior.from_dict(payload["prior"])
    state = init_state(G, D, config, prior)
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.np_rng.bit_generator.state = payload["np_rng"]
    state.torch_rng.set_state(payload["torch_rng"])
    state.step = payload["step"]
    state.order = np.asarray(payload["order"], dtype=np.int64)
    state.cursor = payload["cursor"]
    return state, config, weights


def checkpoint_metadata(path: str | os.PathLike) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return {k: payload[k] for k in ("step", "generator_arch", "taxonomy_version", "prior", "config", "weights")}


# -- loop -------------------------------------------------------------------


class MetricsWriter:
    """Appends one JSON line per step: losses, learning rate, wall clock."""

    def __init__(self, path: str | os.PathLike, config: TrainConfig, every: int = 1):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = self.path.open("a", buffering=1)
        self.config = config
        self.every = every
        self.t0 = time.monotonic()

    def __call__(self, step: int, bundle: LossBundle, state: TrainState) -> None:
        if step % self.every:
            return
        row = {"step": step, "lr": learning_rate(step - 1, self.config), "wallclock": time.monotonic() - self.t0}
        row.update({k: getattr(bundle, k) for k in ("adv_d", "cls_d", "gp_d", "adv_g", "cls_g")})
        self.fh.write(json.dumps(row) + "\n")

    def close(self):
        self.fh.close()


def train(
    data,
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
    *,
    generator: nn.Module | None = None,
    discriminator: nn.Module | None = None,
    state: TrainState | None = None,
    callbacks: Sequence[Callable] = (),
    out_dir: str | os.PathLike | None = None,
) -> tuple[TrainState, list[Path]]:
    """Run ``config.steps`` total steps (resuming from ``state.step`` if given).

    ``data`` is a :class:`TrainingData` or a dataset manifest. Callbacks are
    invoked as ``cb(step, bundle, state)`` after every step. Returns the final
    state and the checkpoint paths written under ``out_dir``.
    """
    if not isinstance(data, TrainingData):
        data = TrainingData.from_manifest(data)
    if len(data) == 0:
        raise ConfigurationError("training data is empty")
    if state is None:
        if generator is None or discriminator is None:
            raise ConfigurationError("pass networks or a resumed state")
        state = init_state(generator, discriminator, config, make_prior(config, data))
    if state.prior is None and data.tags.shape[1]:
        data = TrainingData(data.x, data.tags[:, :0])  # unconditional run ignores tags
    if state.cond_dim != data.tags.shape[1]:
        raise ConfigurationError(f"data has {data.tags.shape[1]} tag columns, prior expects {state.cond_dim}")
    out_dir = Path(out_dir) if out_dir is not None else None
    written: list[Path] = []
    while state.step < config.steps:
        idx = torch.from_numpy(state.next_indices(len(data), config.batch_size))
        bundle = train_step(state, data.x[idx], data.tags[idx], config, weights)
        for cb in callbacks:
            cb(state.step, bundle, state)
        if out_dir is not None and config.checkpoint_every and (
            state.step % config.checkpoint_every == 0 or state.step == config.steps
        ):
            written.append(save_checkpoint(state, out_dir / f"ckpt_{state.step:08d}.pt", config, weights))
            if config.keep_checkpoints and len(written) > config.keep_checkpoints:
                written.pop(0).unlink(missing_ok=True)
    return state, written
