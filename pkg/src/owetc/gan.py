"""Generator/discriminator pair trained on marginal-flow embeddings.

Samples are generated in embedding space and later fed straight to the
classifier head as simulated unknowns. Both networks are small
fully-connected stacks with leaky-ReLU activations, run in float64. The
discriminator logit is soft-clipped to +/-30 so its probability output
stays strictly inside (0, 1).
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

LOGIT_CLIP = 30.0


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 16
    gen_hidden: tuple[int, int] = (128, 128)
    dis_hidden: tuple[int, int] = (128, 128)
    steps: int = 2000
    batch_size: int = 64
    gen_lr: float = 1e-3
    dis_lr: float = 1e-3
    beta1: float = 0.5
    standardize: bool = True
    per_class: bool = False
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        object.__setattr__(self, "gen_hidden", tuple(self.gen_hidden))
        object.__setattr__(self, "dis_hidden", tuple(self.dis_hidden))
        if len(self.gen_hidden) != 2 or len(self.dis_hidden) != 2:
            raise ConfigError("gen_hidden and dis_hidden take exactly two layer widths")

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class Gan(nn.Module):
    def __init__(self, data_dim: int, config: GanConfig):
        super().__init__()
        self.config = config
        self.data_dim = data_dim
        self.generator = _mlp([config.latent_dim, *config.gen_hidden, data_dim]).double()
        self.discriminator = _mlp([data_dim, *config.dis_hidden, 1]).double()
        self.register_buffer("data_mean", torch.zeros(data_dim, dtype=torch.float64))
        self.register_buffer("data_scale", torch.ones(data_dim, dtype=torch.float64))

    def dis_logit(self, x_std: torch.Tensor) -> torch.Tensor:
        raw = self.discriminator(x_std).squeeze(-1)
        return LOGIT_CLIP * torch.tanh(raw / LOGIT_CLIP)

    def discriminate(self, x) -> np.ndarray:
        """Probability that each row of ``x`` (embedding space) is real."""
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        with torch.no_grad():
            return torch.sigmoid(self.dis_logit((x - self.data_mean) / self.data_scale)).numpy()

    def generate_std(self, z: torch.Tensor) -> torch.Tensor:
        return self.generator(z)

    def to_data(self, x_std: torch.Tensor) -> torch.Tensor:
        return x_std * self.data_scale + self.data_mean

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_gan(data_dim: int, config: GanConfig) -> Gan:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Gan(data_dim, config)


def dis_step(gan: Gan, opt, real_std: torch.Tensor, z: torch.Tensor) -> tuple[float, float]:
    """One discriminator update; returns (loss, accuracy on the batch)."""
    with torch.no_grad():
        fake = gan.generate_std(z)
    real_logit = gan.dis_logit(real_std)
    fake_logit = gan.dis_logit(fake)
    loss = F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit)) + \
        F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
    opt.zero_grad()
    loss.backward()
    opt.step()
    acc = 0.5 * (float((real_logit > 0).double().mean()) + float((fake_logit < 0).double().mean()))
    return float(loss.detach()), acc


def gen_step(gan: Gan, opt, z: torch.Tensor) -> float:
    # non-saturating form: maximise log D(G(z))
    logit = gan.dis_logit(gan.generate_std(z))
    loss = F.binary_cross_entropy_with_logits(logit, torch.ones_like(logit))
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_gan(data: np.ndarray, config: GanConfig) -> tuple[Gan, list[dict]]:
    """Adversarial training, one discriminator then one generator step per iteration."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("GAN training data must be a 2-D array")
    if len(data) < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} samples, got {len(data)}")
    gan = init_gan(data.shape[1], config)
    history: list[dict] = []
    if config.standardize and len(data) > 1:
        gan.data_mean.copy_(torch.from_numpy(data.mean(axis=0)))
        gan.data_scale.copy_(torch.from_numpy(np.maximum(data.std(axis=0), 1e-6)))
    if config.steps == 0:
        return gan, history

    real_all = (torch.from_numpy(data) - gan.data_mean) / gan.data_scale
    opt_d = torch.optim.Adam(gan.discriminator.parameters(), lr=config.dis_lr, betas=(config.beta1, 0.999))
    opt_g = torch.optim.Adam(gan.generator.parameters(), lr=config.gen_lr, betas=(config.beta1, 0.999))
    gen = torch.Generator().manual_seed(config.seed + 1)
    last_good = copy.deepcopy(gan.state_dict())
    n = len(data)
    for step in range(config.steps):
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        z = torch.randn(config.batch_size, config.latent_dim, generator=gen, dtype=torch.float64)
        d_loss, acc = dis_step(gan, opt_d, real_all[idx], z)
        z = torch.randn(config.batch_size, config.latent_dim, generator=gen, dtype=torch.float64)
        g_loss = gen_step(gan, opt_g, z)
        if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
            gan.load_state_dict(last_good)
            err = NumericError(f"GAN loss diverged at step {step} (dis={d_loss}, gen={g_loss})")
            err.last_good = gan
            raise err
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append({"step": step, "dis_loss": d_loss, "gen_loss": g_loss, "dis_accuracy": acc})
            last_good = copy.deepcopy(gan.state_dict())
    return gan, history


def synthesize(gan: Gan, count: int, seed: int = 0) -> np.ndarray:
    """``count`` generated embeddings, ``z`` drawn from a standard normal."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.empty((0, gan.data_dim), dtype=np.float32)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(count, gan.config.latent_dim, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        return gan.to_data(gan.generate_std(z)).numpy().astype(np.float32)


def balanced_accuracy(gan: Gan, real: np.ndarray, fake: np.ndarray) -> float:
    """Discriminator accuracy averaged over a real batch and a fake batch."""
    return 0.5 * (float((gan.discriminate(real) > 0.5).mean()) + float((gan.discriminate(fake) <= 0.5).mean()))


@dataclass
class GanEnsemble:
    """One GAN per class; sampling splits the count evenly across members."""

    members: dict = field(default_factory=dict)

    def synthesize(self, count: int, seed: int = 0) -> np.ndarray:
        keys = sorted(self.members, key=str)
        share = np.full(len(keys), count // len(keys))
        share[: count % len(keys)] += 1
        parts = [synthesize(self.members[k], int(c), seed + i) for i, (k, c) in enumerate(zip(keys, share))]
        return np.concatenate(parts) if parts else np.empty((0, 0), dtype=np.float32)


def save_gan(gan: Gan, path) -> str:
    meta = {"kind": "gan", "config": gan.config.to_dict(), "data_dim": gan.data_dim}
    return checkpoint.save(path, gan.state_dict(), meta)


def load_gan(path) -> Gan:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    gan = Gan(meta["data_dim"], GanConfig(**meta["config"]))
    gan.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return gan


def save_synthetic(samples: np.ndarray, path, generator_hash: str) -> str:
    return checkpoint.save(path, {"samples": samples}, {"kind": "synthetic_unknowns", "generator_hash": generator_hash})


def load_synthetic(path) -> tuple[np.ndarray, dict]:
    tensors, meta = checkpoint.load(path)
    return tensors["samples"], meta
