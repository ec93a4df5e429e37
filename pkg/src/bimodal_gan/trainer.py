"""Supervised / unsupervised / semi-supervised training of the sequential
generator, the parallel two-GAN baseline, checkpointing and synthesis.

Iteration accounting: one *iteration* is one supervised step or one
unsupervised cycle (k critic updates + 1 generator update). A
semi-supervised run of N iterations therefore holds N/2 of each, in strict
alternation starting with a supervised step.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .dataset import PairedDataset, dataset_from_arrays, make_unpaired_view
from .networks import (NetConfig, ParallelGenerators, SequentialGenerator, build_critics, build_generator,
                       build_parallel_baseline, load_checkpoint, sample_latent, save_checkpoint)

log = logging.getLogger(__name__)

STRATEGIES = ("supervised", "unsupervised", "semi_supervised")
DEVICE_ENV = "BIMODAL_GAN_DEVICE"


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "semi_supervised"
    total_iterations: int = 10000  # reference runs used 40000
    batch_size: int = 32
    learning_rate: float = 1e-4
    betas: tuple = (0.5, 0.9)
    critic_steps_per_gen_step: int = 5
    lambda_gp: float = losses.LAMBDA_GP
    seed: int = 0
    checkpoint_every: int = 1000
    order: object = "auto"  # "auto" or an explicit (first, second) modality pair
    encoding_reg_weight: float = 0.0  # moment matching of encodings to N(0, I); off by default
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.betas = tuple(self.betas)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("total_iterations", "batch_size", "critic_steps_per_gen_step", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")

    @property
    def latent_dim(self) -> int:
        return self.net.latent_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        if isinstance(self.order, tuple):
            d["order"] = list(self.order)
        return d


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, iteration: int, phase: str, components: dict, wall_time: float):
        for k, v in components.items():
            if not np.isfinite(v):
                raise NumericalError(f"non-finite {k}={v} at iteration {iteration} ({phase})")
        self.records.append({"step": len(self.records), "iteration": iteration, "phase": phase,
                             "wall_time": wall_time, **components})

    def phases(self) -> list[str]:
        return [r["phase"] for r in self.records]

    def deterministic_view(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_csv(self, path):
        keys = ["step", "iteration", "phase", "wall_time"]
        for r in self.records:
            keys += [k for k in r if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.records)
        return Path(path)

    def summary(self, last: int = 100) -> dict:
        out = {}
        for phase in ("sup", "unsup-critic", "unsup-gen"):
            rows = [r for r in self.records if r["phase"] == phase][-last:]
            if rows:
                out[phase] = {"n": len(rows), "mean_value": float(np.mean([r["value"] for r in rows]))}
        return out


# ---------------------------------------------------------------------------
# data


class BatchStream:
    """Endless batches over an (N, H, W) or (N, C, H, W) array with a seeded
    reshuffle per epoch."""

    def __init__(self, data: np.ndarray, batch_size: int, seed: int, stream: int):
        data = torch.as_tensor(np.asarray(data, dtype=np.float32))
        self.data = data[:, None] if data.dim() == 3 else data
        self.batch_size = min(batch_size, len(self.data))
        self.seed, self.stream = seed, stream
        self.epoch, self.pos = 0, 0
        self._perm = self._permutation()

    def _permutation(self):
        rng = np.random.default_rng([self.seed, self.stream, self.epoch])
        return rng.permutation(len(self.data))

    def next_indices(self):
        if self.pos >= len(self._perm):
            self.epoch, self.pos = self.epoch + 1, 0
            self._perm = self._permutation()
        idx = self._perm[self.pos:self.pos + self.batch_size]
        self.pos += len(idx)
        return idx

    def next(self, device="cpu"):
        return self.data[self.next_indices()].to(device)

    def state(self):
        return {"epoch": self.epoch, "pos": self.pos}

    def load_state(self, st):
        self.epoch, self.pos = st["epoch"], st["pos"]
        self._perm = self._permutation()


def default_device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the models, optimizers, data streams, RNG state and the log.

    ``architecture="sequential"`` trains :class:`SequentialGenerator`;
    ``"parallel"`` trains the two-decoder baseline (unsupervised only).
    """

    def __init__(self, cfg: TrainConfig, paired: PairedDataset | None = None, unpaired: PairedDataset | None = None,
                 architecture: str = "sequential", out_dir=None, device=None):
        self.cfg = cfg
        self.architecture = architecture
        self.device = device or default_device()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if architecture == "sequential":
            self.G = build_generator(cfg.net, cfg.seed)
            self.D = build_critics(cfg.net, cfg.seed)
        elif architecture == "parallel":
            if cfg.strategy != "unsupervised":
                raise ValueError("the parallel baseline is trained unsupervised only")
            self.G, self.D = build_parallel_baseline(cfg.net, cfg.seed)
        else:
            raise ValueError(f"unknown architecture {architecture!r}")
        self.G.to(self.device)
        self.D.to(self.device)
        adam = lambda params: torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)
        self.opt_d = adam(self.D.parameters())
        if architecture == "sequential":
            self.opt_sup = adam(self.G.parameters())
            self.opt_gen = adam(self.G.synth_parameters())
        else:
            self.opt_sup = None
            self.opt_gen = adam(self.G.parameters())
        self.noise = torch.Generator().manual_seed(cfg.seed * 1000 + 17)

        self._check_data(paired, unpaired)
        self.paired_stream = None
        self.unpaired_streams = None
        if cfg.strategy in ("supervised", "semi_supervised"):
            a, b = paired.arrays()
            self.paired_stream = BatchStream(np.stack([a, b], 1), cfg.batch_size, cfg.seed, 0)
        if cfg.strategy in ("unsupervised", "semi_supervised"):
            ua, ub = unpaired.arrays()
            self.unpaired_streams = (BatchStream(ua, cfg.batch_size, cfg.seed, 1),
                                     BatchStream(ub, cfg.batch_size, cfg.seed, 2))
        self.iteration = 0
        self.log = TrainingLog()
        self._t0 = time.perf_counter()

    def _check_data(self, paired, unpaired):
        s = self.cfg.strategy
        if s in ("supervised", "semi_supervised") and (paired is None or len(paired) == 0):
            raise ValueError(f"strategy {s!r} needs a non-empty paired dataset")
        if s in ("unsupervised", "semi_supervised") and (unpaired is None or len(unpaired) == 0):
            raise ValueError(f"strategy {s!r} needs a non-empty unpaired dataset")
        for ds in (paired, unpaired):
            if ds is not None and len(ds) and ds.image_size != self.cfg.net.image_size:
                raise ValueError(f"dataset image size {ds.image_size} != model image size {self.cfg.net.image_size}")

    @property
    def descriptor(self) -> str:
        return f"{self.cfg.net.descriptor()};arch={self.architecture}"

    # -- phases ----------------------------------------------------------

    def _latent(self, n):
        return sample_latent(n, latent_dim=self.cfg.latent_dim, generator=self.noise).to(self.device)

    def _record(self, phase, lv: losses.LossValue):
        self.log.append(self.iteration, phase, lv.record(), time.perf_counter() - self._t0)

    def _guard(self, lv: losses.LossValue, phase: str):
        if not torch.isfinite(lv.value):
            path = self.save(tag="diagnostic")
            raise NumericalError(f"non-finite {phase} loss at iteration {self.iteration}; state saved to {path}")

    def supervised_step(self, real1, real2) -> losses.LossValue:
        """One L1 step through encode -> decode -> translate; critics untouched."""
        G = self.G
        z = G.encode(real1)
        fake1 = G.decode(z)
        fake2 = G.translate(fake1)
        lv = losses.recon_l1(real1, real2, fake1, fake2)
        if self.cfg.encoding_reg_weight > 0:
            reg = z.mean(0).pow(2).mean() + (z.var(0) - 1).pow(2).mean()
            lv = losses.LossValue(lv.value + self.cfg.encoding_reg_weight * reg,
                                  {**lv.components, "encoding_reg": float(reg.detach())})
        self._guard(lv, "supervised")
        self.opt_sup.zero_grad(set_to_none=True)
        lv.value.backward()
        self.opt_sup.step()
        return lv

    def critic_step(self, real1, real2, fakes=None) -> losses.LossValue:
        if fakes is None:
            with torch.no_grad():
                fakes = self.G(self._latent(len(real1)))
        fake1, fake2 = fakes
        lam = self.cfg.lambda_gp
        o1 = losses.critic_objective(self.D.d1, real1, fake1, lam, generator=self.noise)
        o2 = losses.critic_objective(self.D.d2, real2, fake2, lam, generator=self.noise)
        lv = losses.LossValue(o1.value + o2.value, {
            "w1": o1.components["w_estimate"], "w2": o2.components["w_estimate"],
            "penalty1": o1.components["penalty"], "penalty2": o2.components["penalty"]})
        self._guard(lv, "critic")
        self.opt_d.zero_grad(set_to_none=True)
        lv.value.backward()
        self.opt_d.step()
        return lv

    def generator_step(self, n) -> losses.LossValue:
        fake1, fake2 = self.G(self._latent(n))
        lv = losses.generator_unsup_loss(self.D, fake1, fake2)
        self._guard(lv, "generator")
        self.opt_gen.zero_grad(set_to_none=True)
        lv.value.backward()
        self.opt_gen.step()
        self.D.zero_grad(set_to_none=True)
        return lv

    def unsupervised_step(self, real1=None, real2=None, callback=None):
        """k critic updates then one generator update; the encoder is untouched.

        ``real1``/``real2`` may be single batches (reused for every critic
        update) or lists of k batches; by default fresh batches are drawn.
        """
        k = self.cfg.critic_steps_per_gen_step
        reals = [(self._pick(real1, i, 0), self._pick(real2, i, 1)) for i in range(k)]
        # G is fixed during the critic updates, so all k fake batches come from one forward pass
        sizes = [len(r1) for r1, _ in reals]
        with torch.no_grad():
            fakes1, fakes2 = (f.split(sizes) for f in self.G(self._latent(sum(sizes))))
        critic_losses = []
        for i, (r1, r2) in enumerate(reals):
            lv = self.critic_step(r1, r2, (fakes1[i], fakes2[i]))
            critic_losses.append(lv)
            self._record("unsup-critic", lv)
            if callback:
                callback(self, "unsup-critic")
        gen = self.generator_step(self.cfg.batch_size)
        self._record("unsup-gen", gen)
        return critic_losses, gen

    def _pick(self, given, i, which):
        if given is None:
            return self.unpaired_streams[which].next(self.device)
        if isinstance(given, (list, tuple)):
            return given[i].to(self.device)
        return given.to(self.device)

    def phase_for(self, iteration: int) -> str:
        s = self.cfg.strategy
        if s == "semi_supervised":
            return "sup" if iteration % 2 == 0 else "unsup"
        return "sup" if s == "supervised" else "unsup"

    # -- loop --------------------------------------------------------------

    def run(self, until: int | None = None, callback=None):
        """Train up to ``until`` (default: total_iterations) iterations.

        ``callback(trainer, phase)`` fires after every logged phase-step.
        """
        until = self.cfg.total_iterations if until is None else min(until, self.cfg.total_iterations)
        self.G.train()
        self.D.train()
        start = self.iteration
        while self.iteration < until:
            if self.phase_for(self.iteration) == "sup":
                pair = self.paired_stream.next(self.device)
                lv = self.supervised_step(pair[:, 0:1], pair[:, 1:2])
                self._record("sup", lv)
                if callback:
                    callback(self, "sup")
            else:
                self.unsupervised_step(callback=None if callback is None else callback)
                if callback:
                    callback(self, "unsup-gen")
            self.iteration += 1
            if self.out_dir is not None and self.iteration % self.cfg.checkpoint_every == 0:
                self.save()
        done = self.iteration == self.cfg.total_iterations
        # a finished run that is re-entered leaves its files untouched
        if self.out_dir is not None and done and (self.iteration > start or not (self.out_dir / "final.pt").exists()):
            self.save(tag="final")
            self.log.to_csv(self.out_dir / "training_log.csv")
        return self

    # -- persistence -----------------------------------------------------------

    def state(self) -> dict:
        return dict(
            descriptor=self.descriptor,
            modules={"generator": self.G, "critics": self.D},
            optimizers={k: o for k, o in (("sup", self.opt_sup), ("gen", self.opt_gen), ("critic", self.opt_d)) if o},
            iteration=self.iteration,
            seeds={"seed": self.cfg.seed},
            extra={
                "config": self.cfg.to_dict(),
                "noise_state": self.noise.get_state(),
                "streams": {
                    "paired": self.paired_stream.state() if self.paired_stream else None,
                    "unpaired": [s.state() for s in self.unpaired_streams] if self.unpaired_streams else None,
                },
                # wall times are left out so identical runs give identical files
                "log": self.log.deterministic_view(),
            },
        )

    def save(self, path=None, tag=None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValueError("no output directory configured")
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / (f"{tag}.pt" if tag else f"ckpt_{self.iteration:06d}.pt")
        save_checkpoint(path, **self.state())
        return Path(path)

    def resume(self, path):
        ck = load_checkpoint(path, self.descriptor)
        self.G.load_state_dict(ck["modules"]["generator"])
        self.D.load_state_dict(ck["modules"]["critics"])
        for name, opt in (("sup", self.opt_sup), ("gen", self.opt_gen), ("critic", self.opt_d)):
            if opt is not None and name in ck["optimizers"]:
                opt.load_state_dict(ck["optimizers"][name])
        self.iteration = ck["iteration"]
        ex = ck["extra"]
        self.noise.set_state(ex["noise_state"])
        self.log = TrainingLog([{**r, "wall_time": float("nan")} for r in ex.get("log", [])])
        if self.paired_stream and ex["streams"]["paired"]:
            self.paired_stream.load_state(ex["streams"]["paired"])
        if self.unpaired_streams and ex["streams"]["unpaired"]:
            for s, st in zip(self.unpaired_streams, ex["streams"]["unpaired"]):
                s.load_state(st)
        return self


def latest_checkpoint(out_dir) -> Path | None:
    out_dir = Path(out_dir)
    final = out_dir / "final.pt"
    if final.exists():
        return final
    ckpts = sorted(out_dir.glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None


def orient(dataset: PairedDataset | None, order) -> PairedDataset | None:
    """Return ``dataset`` with its first modality equal to ``order[0]``."""
    if dataset is None or order is None or tuple(order) == dataset.modality_names:
        return dataset
    if tuple(order) == dataset.modality_names[::-1]:
        return dataset.swapped()
    raise ValueError(f"order {tuple(order)} does not match dataset modalities {dataset.modality_names}")


def train(cfg: TrainConfig, paired: PairedDataset | None, unpaired: PairedDataset | None = None, out_dir=None,
          resume=None, callback=None, order=None) -> Trainer:
    """Train the sequential generator. ``order`` (or ``cfg.order`` when
    explicit) names the modality synthesised first; datasets are re-oriented."""
    if order is None and cfg.order != "auto":
        order = tuple(cfg.order)
    if order is None and paired is not None:
        order = paired.modality_names
    if order is not None:
        cfg = dataclasses.replace(cfg, order=tuple(order))
    paired, unpaired = orient(paired, order), orient(unpaired, order)
    if unpaired is None and cfg.strategy != "supervised" and paired is not None:
        unpaired = make_unpaired_view(paired, cfg.seed)
    trainer = Trainer(cfg, paired, unpaired, "sequential", out_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(callback=callback)


def train_parallel_baseline(cfg: TrainConfig, real: PairedDataset, out_dir=None) -> Trainer:
    """Unsupervised training of two independent decoders on a shared z.

    ``real`` supplies the per-modality image pools; its pairing is ignored
    (both pools are reshuffled independently).
    """
    cfg = dataclasses.replace(cfg, strategy="unsupervised")
    trainer = Trainer(cfg, None, real, "parallel", out_dir)
    return trainer.run()


@torch.no_grad()
def generate_arrays(model, n: int, seed: int, latent_dim: int, batch: int = 250, device=None):
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    out1, out2 = [], []
    z_all = sample_latent(n, latent_dim=latent_dim, generator=gen)
    for s in range(0, n, batch):
        f1, f2 = model(z_all[s:s + batch].to(device))
        out1.append(f1.cpu()[:, 0].numpy())
        out2.append(f2.cpu()[:, 0].numpy())
    model.train(was_training)
    return np.concatenate(out1), np.concatenate(out2)


def synthesize(model, n: int, seed: int, modality_names=("a", "b"), latent_dim: int | None = None) -> PairedDataset:
    """n pairs z -> F_dec(z) -> T(.) (or the two parallel decoders)."""
    if latent_dim is None:
        latent_dim = model.cfg.latent_dim
    a, b = generate_arrays(model, n, seed, latent_dim)
    return dataset_from_arrays(a, b, tuple(modality_names), prefix="syn")


def load_generator(path, architecture: str | None = None):
    """Rebuild a generator from a checkpoint; returns (model, payload).
    The architecture is read from the checkpoint unless one is demanded."""
    from .networks import net_config_from_descriptor

    ck = load_checkpoint(path)
    net_desc, _, arch = ck["descriptor"].partition(";arch=")
    architecture = architecture or arch
    if arch != architecture or arch not in ("sequential", "parallel"):
        from .networks import DescriptorMismatch
        raise DescriptorMismatch(f"{path}: checkpoint architecture {arch!r}, expected {architecture!r}")
    cfg = net_config_from_descriptor(net_desc)
    model = SequentialGenerator(cfg) if architecture == "sequential" else ParallelGenerators(cfg)
    model.load_state_dict(ck["modules"]["generator"])
    return model.eval(), ck
