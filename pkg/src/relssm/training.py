"""Optimization loop: Adam with global-norm clipping and cosine decay."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .auxobj import AuxParams
from .dynamics import GenerativeParams
from .inference import ProposalParams
from .smc import EpisodeBatch, bound_gradient
from .tensor import NonFiniteError, Tensor

__all__ = ["OptConfig", "Adam", "cosine_lr", "train"]


@dataclass
class OptConfig:
    lr: float = 1e-3
    total_steps: int = 5000
    clip_norm: float = 1.0
    batch_size: int = 16
    k_particles: int = 4
    beta1_aux: float = 1.0
    beta2_aux: float = 1.0
    lr_floor: float = 1e-5
    checkpoint_every: int = 1000
    kl_ema_decay: float = 0.99


def cosine_lr(step: int, cfg: OptConfig) -> float:
    s = min(step, cfg.total_steps) / max(cfg.total_steps, 1)
    return cfg.lr * ((1.0 - s) * (0.5 + 0.5 * math.cos(math.pi * s)) + cfg.lr_floor)


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.value = p.value - lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"m.{k}"]
            self.v[k] = arrays[f"v.{k}"]
        self.t = t


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


def named_params(gen, prop, aux) -> dict:
    params = dict(gen.named_parameters("gen."))
    params.update(prop.named_parameters("prop."))
    if aux is not None:
        params.update(aux.named_parameters("aux."))
    return params


def train(gen: GenerativeParams, prop: ProposalParams, aux: AuxParams | None,
          split, cfg: OptConfig, rng, out_dir=None, start_step: int = 0,
          optimizer: Adam | None = None, log_lines: list | None = None,
          ckpt_config: dict | None = None):
    """Maximize the bound-plus-auxiliary objective over the training split.

    Appends one tab-separated line per step (step, bound, L1, L2,
    KL-estimate, lr, wall-time) to ``<out_dir>/metrics.log`` and writes
    periodic checkpoints. A non-finite loss aborts, leaving the most recent
    good checkpoint in place. Returns the per-step metrics history.
    """
    from .fileio import write_checkpoint

    params = named_params(gen, prop, aux)
    opt = optimizer or Adam(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "metrics.log" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    n_examples = split.n_examples
    kl_ema = None
    t_start = time.time()

    def checkpoint(step):
        if out_dir is None:
            return
        write_checkpoint(
            out_dir / "checkpoint", {k: p.value for k, p in params.items()},
            step=step, rng_state=rng.bit_generator.state,
            extra=opt.state_arrays(), extra_meta={"adam_t": opt.t},
            config=ckpt_config,
        )

    for step in range(start_step, cfg.total_steps):
        idx = rng.choice(n_examples, size=min(cfg.batch_size, n_examples), replace=False)
        batch = EpisodeBatch(
            [split.graphs[i] for i in idx], split.X[idx],
            None if getattr(split, "U", None) is None else split.U[idx],
        )
        grads, metrics = bound_gradient(
            gen, prop, aux, batch, cfg.k_particles, rng,
            beta1=cfg.beta1_aux, beta2=cfg.beta2_aux,
        )
        if not math.isfinite(metrics["objective"]):
            raise NonFiniteError(f"non-finite objective at step {step}; last checkpoint kept")
        gnorm = clip_global_norm(grads, cfg.clip_norm)
        lr = cosine_lr(step, cfg)
        opt.step(grads, lr)
        kl = metrics["kl_per_step"]
        kl_ema = kl if kl_ema is None else cfg.kl_ema_decay * kl_ema + (1 - cfg.kl_ema_decay) * kl
        row = {
            "step": step, "bound": metrics["bound"], "l1": metrics["l1_aux"],
            "l2": metrics["l2_aux"], "kl": kl, "kl_ema": kl_ema, "lr": lr,
            "grad_norm": gnorm, "wall": time.time() - t_start,
        }
        history.append(row)
        line = (
            f"{step}\t{row['bound']:.6f}\t{row['l1']:.6f}\t{row['l2']:.6f}"
            f"\t{row['kl']:.6f}\t{lr:.8f}\t{row['wall']:.3f}\n"
        )
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(line)
        if log_lines is not None:
            log_lines.append(line)
        if out_dir and ((step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.total_steps):
            checkpoint(step + 1)
    if out_dir and cfg.total_steps == start_step:
        checkpoint(start_step)
    return history
