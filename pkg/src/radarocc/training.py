"""Synthetic datasets, Adam with warm-up + cosine schedule, training and evaluation loops."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import hfov_mask
from .losses import TERMS, LossNormalizer, total_loss
from .metrics import DEFAULT_RANGES, MetricAccumulator, MetricTable
from .network import ModelConfig, RadarOcc
from .occupancy import ClassWeights, OccupancyGrid, build_gt, class_weights_from_frequency, load_grid, save_grid
from .radar_signal import RadarTensor4D, load_4drt, save_4drt, simulate_frame
from .scenes import random_scenario
from .tensor_core import ParamStore, Tape
from .volume_reduction import SparseRT, load_sparse_rt, reduce_tensor

log = logging.getLogger("radarocc")


class NumericError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


# ---------------------------------------------------------------- data

@dataclass
class Sample:
    name: str
    gt: OccupancyGrid
    rt: RadarTensor4D | None = None
    sparse: SparseRT | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def reduced(self, cfg: ModelConfig) -> SparseRT:
        """SparseRT for the model's reduction settings (a stored SparseRT is used as-is)."""
        if self.rt is None:
            if self.sparse is None:
                raise ValueError(f"sample {self.name} has neither a radar tensor nor a SparseRT")
            return self.sparse
        key = (cfg.sss, cfg.dbd, cfg.n_r)
        if key not in self._cache:
            self._cache[key] = reduce_tensor(self.rt, mode=cfg.sss, n_r=cfg.n_r, descriptor=cfg.dbd)
        return self._cache[key]


def synthetic_sample(cfg: ModelConfig, seed: int, index: int, frames_per_scene: int = 3) -> Sample:
    """One random desk scene: radar tensor at frame 0 and its aggregated ground truth."""
    rng = np.random.default_rng([seed, index])
    scen = random_scenario(rng, cfg.grid)
    rt = simulate_frame(scen.radar_scene(0, cfg.radar), cfg.radar, seed=int(rng.integers(2**31)))
    # stored at file precision so in-memory and on-disk datasets agree
    rt.power = rt.power.astype(np.float32).astype(np.float64)
    gt = build_gt(scen.sequence(frames_per_scene), 0, cfg.grid)
    return Sample(f"{index:04d}", gt, rt=rt)


def synthetic_dataset(cfg: ModelConfig, n: int, seed: int, offset: int = 0,
                      frames_per_scene: int = 3) -> list[Sample]:
    return [synthetic_sample(cfg, seed, offset + i, frames_per_scene) for i in range(n)]


def save_dataset(path, samples: list[Sample]) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.rt is not None:
            save_4drt(out / f"{s.name}.4drt", s.rt)
        save_grid(out / f"{s.name}.grid", s.gt)


def load_dataset(path) -> list[Sample]:
    """Pairs ``<name>.grid`` with ``<name>.4drt`` (preferred) or ``<name>.sprt``."""
    root = Path(path)
    samples = []
    for g in sorted(root.glob("*.grid")):
        rt_path, sp_path = g.with_suffix(".4drt"), g.with_suffix(".sprt")
        if rt_path.exists():
            samples.append(Sample(g.stem, load_grid(g), rt=load_4drt(rt_path)))
        elif sp_path.exists():
            samples.append(Sample(g.stem, load_grid(g), sparse=load_sparse_rt(sp_path)))
        else:
            raise ValueError(f"{g}: no matching .4drt or .sprt file")
    if not samples:
        raise ValueError(f"{root}: no samples found")
    return samples


# ---------------------------------------------------------------- optimizer

def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 1 / 3) -> float:
    """Linear warm-up from 0, then cosine annealing to 0 at the last step."""
    warm = int(round(total_steps * warmup_fraction))
    if step < warm:
        return base_lr * step / warm
    tail = total_steps - 1 - warm
    if tail <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step - warm, tail) / tail))


class Adam:
    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in params.trainable()}
        self.v = {p.name: np.zeros_like(p.data) for p in params.trainable()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in self.params.trainable():
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array(float(self.t))
        return out

    def load_state(self, records: dict) -> None:
        for k in self.m:
            self.m[k] = records[f"adam.m/{k}"].copy()
            self.v[k] = records[f"adam.v/{k}"].copy()
        self.t = int(records["adam.step"])


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "run"
    train_dir: str | None = None
    val_dir: str | None = None
    n_train: int = 64            # synthetic data when no directory is given
    n_val: int = 16
    data_seed: int = 1
    frames_per_scene: int = 3
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    steps: int | None = None     # overrides epochs * n_train
    warmup_fraction: float = 1 / 3
    batch_size: int = 1
    loss_normalization: bool = True
    class_weights: str = "frequency"
    val_every: int | None = None  # default: once per epoch
    save_every: int | None = None
    rwa: bool = True
    dbd: bool = True
    sss: str = "sidelobe"
    sfe: str = "spherical"
    model: dict = field(default_factory=dict)
    ranges: tuple[float, ...] = DEFAULT_RANGES

    def __post_init__(self):
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"profile must be desk|paper, got {self.profile!r}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.lr <= 0 or not 0 <= self.warmup_fraction < 1:
            raise ValueError("lr must be positive and warmup_fraction in [0, 1)")
        if self.class_weights not in ("frequency", "uniform"):
            raise ValueError(f"class_weights must be frequency|uniform, got {self.class_weights!r}")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        self.ranges = tuple(float(r) for r in self.ranges)
        self.model_config()   # validate toggles and model overrides eagerly

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["ranges"] = list(self.ranges)
        return d

    def model_config(self) -> ModelConfig:
        d = dict(self.model)
        d.update(profile=self.profile, rwa=self.rwa, dbd=self.dbd, sss=self.sss, sfe=self.sfe)
        return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: RadarOcc, extra: dict | None = None) -> None:
    model.params.save(path, extra)
    Path(str(path) + ".json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path, cfg: ModelConfig | None = None) -> tuple[RadarOcc, dict]:
    side = Path(str(path) + ".json")
    if cfg is None:
        if not side.exists():
            raise ValueError(f"{path}: no model config sidecar; pass one explicitly")
        cfg = ModelConfig.from_dict(json.loads(side.read_text()))
    model = RadarOcc(cfg)
    rest = model.params.load(path)
    return model, rest


# ---------------------------------------------------------------- loops

def evaluate(model: RadarOcc, samples: list[Sample], ranges=DEFAULT_RANGES) -> MetricTable:
    mask = hfov_mask(model.cfg.grid)
    acc = MetricAccumulator(tuple(ranges))
    for s in samples:
        pred = OccupancyGrid(model.predict(s.reduced(model.cfg)), model.cfg.grid)
        acc.add(pred, s.gt, mask)
    return acc.table()


def occupied_iou(table: MetricTable) -> float:
    return table.get("IoU", max(table.ranges))


def _order(n: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def train(run: RunConfig, train_set: list[Sample], val_set: list[Sample] | None = None,
          resume: str | None = None, stop_at: int | None = None) -> dict:
    """Train and write ``loss.csv``, ``final.ckpt`` and (with validation data) ``best.ckpt``.

    ``stop_at`` ends the run early after that many steps while keeping the
    schedule of the full run, so a later ``resume`` continues it exactly.
    """
    cfg = run.model_config()
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = RadarOcc(cfg, seed=run.seed)
    opt = Adam(model.params, run.beta1, run.beta2, run.eps)
    normalizer = LossNormalizer(enabled=run.loss_normalization)
    weights = class_weights_from_frequency([s.gt for s in train_set]) \
        if run.class_weights == "frequency" else ClassWeights.uniform()
    n = len(train_set)
    total_steps = run.steps if run.steps is not None else run.epochs * n
    val_every = run.val_every or n
    start = 0
    best = -math.inf
    if resume is not None:
        rest = model.params.load(resume)
        opt.load_state(rest)
        start = int(rest["train.step"])
        normalizer.ema = {k: float(rest[f"norm/{k}"]) for k in TERMS if f"norm/{k}" in rest}
        best = float(rest.get("train.best", np.array(-math.inf)))
    end = total_steps if stop_at is None else min(stop_at, total_steps)

    log.info("weights free=%.6g bg=%.6g fg=%.6g; %d steps", *weights.as_array(), total_steps)
    header = ["step", "lr", *TERMS, "raw_total", "total"]
    csv_path = out / "loss.csv"
    mode = "a" if resume is not None and csv_path.exists() else "w"
    history = []
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(header)
        for step in range(start, end):
            epoch, pos = divmod(step, n)
            sample = train_set[_order(n, epoch, run.seed)[pos]]
            lr = lr_at(step, total_steps, run.lr, run.warmup_fraction)
            model.params.zero_grad()
            with Tape() as tape:
                logits = model.forward(sample.reduced(cfg), training=True,
                                       rng=np.random.default_rng([run.seed, 11, step]))
                loss, report = total_loss(logits, sample.gt.labels, weights, normalizer)
            if not np.isfinite(loss.data):
                raise NumericError(step, "loss")
            tape.backward(loss)
            opt.step(lr)
            writer.writerow([step, repr(lr), *(repr(report[k]) for k in TERMS),
                             repr(report["raw_total"]), repr(report["total"])])
            history.append(report)
            done = step + 1
            if val_set and (done % val_every == 0 or done == total_steps):
                iou = occupied_iou(evaluate(model, val_set, run.ranges))
                log.info("step %d val IoU %.4f", done, iou)
                if iou > best:
                    best = iou
                    save_model(out / "best.ckpt", model)
            if run.save_every and done % run.save_every == 0 and done < total_steps:
                save_model(out / f"step{done:06d}.ckpt", model, _resume_state(opt, normalizer, done, best))
    save_model(out / ("final.ckpt" if end == total_steps else f"step{end:06d}.ckpt"), model,
               _resume_state(opt, normalizer, end, best))
    return {"model": model, "history": history, "weights": weights, "steps": end}


def _resume_state(opt: Adam, normalizer: LossNormalizer, step: int, best: float) -> dict:
    extra = opt.state()
    extra["train.step"] = np.array(float(step))
    extra["train.best"] = np.array(best)
    for k, v in normalizer.ema.items():
        extra[f"norm/{k}"] = np.array(v)
    return extra


def read_loss_csv(path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def block_means(values, block: int = 50) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    return [float(v[i:i + block].mean()) for i in range(0, len(v) - block + 1, block)]
