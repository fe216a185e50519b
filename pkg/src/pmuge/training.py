"""Adversarial training loop for the factor generator."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import ConfigError
from .losses import LossReport, gan_losses, generator_objective
from .model import ArchConfig, Discriminator, Generator, stack_factors, stack_signatures
from .nnkit import Adam, backward, load_module_tensors, load_params, module_tensors, save_params

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at epoch {epoch}; last good checkpoint: {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 50
    lr_gen: float = 1e-3
    lr_disc: float = 1e-5
    weight_decay: float = 0.25
    checkpoint_every: int = 25
    dq: float = 1 / 25
    quantile_target: str = "smoothed"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs, batch_size and checkpoint_every must be >= 1")
        if not (self.lr_gen > 0 and self.lr_disc > 0):
            raise ConfigError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class Example:
    event_id: str
    signatures: np.ndarray   # (D*S, T) stacked
    factors: np.ndarray      # (N, D*S), scaled by sqrt(N)


def make_examples(decompositions) -> list[Example]:
    """Stacked signatures and sqrt(N)-scaled stacked factors per decomposition."""
    out = []
    for d in decompositions:
        P = np.asarray(d.factors)
        out.append(Example(d.event_id, stack_signatures(np.asarray(d.signatures)),
                           stack_factors(P) * math.sqrt(P.shape[1])))
    return out


def batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a lone leftover joins the previous batch
    since batch norm cannot train on one event."""
    order = rng.permutation(n)
    parts = [order[i:i + size] for i in range(0, n, size)]
    if len(parts) > 1 and len(parts[-1]) == 1:
        lone = parts.pop()
        parts[-1] = np.concatenate([parts[-1], lone])
    return parts


def resample_pmus(rows: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly n PMU rows: all of them if the count matches, else a random
    subset (or draw with replacement when there are too few)."""
    if rows.shape[0] == n:
        return rows
    idx = rng.choice(rows.shape[0], size=n, replace=rows.shape[0] < n)
    return rows[np.sort(idx)]


def save_checkpoint(path, gen: Generator, disc: Discriminator, epoch: int,
                    opt_g: Adam | None = None, opt_d: Adam | None = None,
                    tcfg: TrainConfig | None = None):
    tensors = module_tensors(gen, "gen.")
    tensors.update(module_tensors(disc, "disc."))
    if opt_g is not None:
        tensors.update(opt_g.state_tensors("opt_g"))
    if opt_d is not None:
        tensors.update(opt_d.state_tensors("opt_d"))
    meta = {"arch": gen.cfg.to_dict(), "epoch": epoch,
            "train": asdict(tcfg) if tcfg is not None else None}
    return save_params(path, tensors, meta)


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[Generator, Discriminator, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    meta, tensors = load_params(path)
    cfg = ArchConfig(**meta["arch"])
    gen, disc = Generator(cfg, 0, dtype), Discriminator(cfg, 0, dtype)
    load_module_tensors(gen, tensors, "gen.")
    load_module_tensors(disc, tensors, "disc.")
    return gen, disc, meta


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    history: list
    checkpoints: list


def _snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def train(examples: list[Example], arch: ArchConfig, tcfg: TrainConfig, seed: int,
          out_dir=None, dtype: torch.dtype = torch.float32) -> TrainResult:
    """Train generator and discriminator; one LossReport per epoch.

    With ``out_dir`` a loss log and checkpoints (every ``checkpoint_every``
    epochs and at the end) are written there. A non-finite loss stops
    training; the last finished epoch is then saved as
    ``checkpoint_last_good.pmue`` and TrainingDiverged is raised.
    """
    if len(examples) < 2:
        raise ConfigError("training needs at least 2 events")
    ds, T = examples[0].signatures.shape
    if ds != arch.DS or T != arch.T:
        raise ConfigError(f"examples are ({ds}, {T}) but arch expects ({arch.DS}, {arch.T})")
    seq = np.random.SeedSequence(seed)
    s_gen, s_disc, s_np, s_torch = seq.spawn(4)
    gen = Generator(arch, int(s_gen.generate_state(1)[0]), dtype)
    disc = Discriminator(arch, int(s_disc.generate_state(1)[0]), dtype)
    rng = np.random.default_rng(s_np)
    tgen = torch.Generator().manual_seed(int(s_torch.generate_state(1)[0]))
    opt_g = Adam(gen, tcfg.lr_gen, tcfg.weight_decay)
    opt_d = Adam(disc, tcfg.lr_disc, tcfg.weight_decay)

    out = Path(out_dir) if out_dir is not None else None
    log = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "loss_log.tsv", "w", encoding="utf-8")
        log.write("\t".join(["epoch", *LossReport.columns()]) + "\n")
        timing = open(out / "timing.tsv", "w", encoding="utf-8")
        timing.write("epoch\twall_seconds\n")

    history, checkpoints = [], []
    good = (0, _snapshot(gen), _snapshot(disc))
    gen.train()
    disc.train()
    try:
        for epoch in range(1, tcfg.epochs + 1):
            t0 = time.perf_counter()
            reports = []
            for idx in batches(len(examples), tcfg.batch_size, rng):
                x = torch.as_tensor(np.stack([examples[i].signatures for i in idx]), dtype=dtype)
                real = torch.as_tensor(np.stack([resample_pmus(examples[i].factors, arch.N, rng)
                                                 for i in idx]), dtype=dtype)
                fake = gen(x, arch.N, tgen)

                d_real = disc(x, real.transpose(1, 2))
                d_fake = disc(x, fake.detach().transpose(1, 2))
                _, l_d = gan_losses(d_real, d_fake)
                if not torch.isfinite(l_d):
                    raise FloatingPointError
                opt_d.step(backward(l_d, disc))

                total, rep = generator_objective(real, fake, disc(x, fake.transpose(1, 2)),
                                                 tcfg.dq, tcfg.quantile_target)
                rep.gan_d = float(l_d.detach())
                if not rep.is_finite():
                    raise FloatingPointError
                opt_g.step(backward(total, gen))
                reports.append(rep)
            rep = LossReport.mean(reports)
            history.append(rep)
            good = (epoch, _snapshot(gen), _snapshot(disc))
            if log is not None:
                log.write("\t".join([str(epoch)] + [repr(v) for v in rep.values()]) + "\n")
                log.flush()
                timing.write(f"{epoch}\t{time.perf_counter() - t0:.3f}\n")
                if epoch % tcfg.checkpoint_every == 0 or epoch == tcfg.epochs:
                    p = out / f"checkpoint_{epoch:04d}.pmue"
                    save_checkpoint(p, gen, disc, epoch, opt_g, opt_d, tcfg)
                    checkpoints.append(p)
            logger.info("epoch %d total_g %.5g gan_d %.5g", epoch, rep.total_g, rep.gan_d)
    except FloatingPointError:
        epoch_bad = len(history) + 1
        path = None
        if out is not None:
            gen.load_state_dict(good[1])
            disc.load_state_dict(good[2])
            path = out / "checkpoint_last_good.pmue"
            save_checkpoint(path, gen, disc, good[0], tcfg=tcfg)
        raise TrainingDiverged(epoch_bad, path) from None
    finally:
        if log is not None:
            log.close()
            timing.close()
    return TrainResult(gen, disc, history, checkpoints)
