"""Pretraining, fine-tuning and evaluation loops, plus experiment configuration."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from trajxfer.core import ModelConfig, TaskInstance, Trajectory
from trajxfer.errors import DataEmpty, DivergedLoss, TooShort
from trajxfer.geo import RegionContext
from trajxfer.model import RTTE, Featurizer, batch_loss, check_compatible
from trajxfer.moe import GateStats
from trajxfer.tasks import (
    TaskKind,
    extract_travel_time,
    linear_interp_baseline,
    make_instance,
    masked_positions,
    metrics,
    pretrain_mask,
)

log = logging.getLogger(__name__)

MAPE_MIN_MINUTES = 1.0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    poi_path: str | None = None
    road_path: str | None = None
    cache_path: str | None = None
    embedding_provider: str = "stub"  # stub | remote
    data_format: str = "point-rows"
    task: str = "pretrain"
    transfer_mode: str = "in-region"  # in-region | zero-shot | few-shot
    few_shot_n: int = 5000
    pretrain_epochs: int = 30
    finetune_epochs: int = 50
    patience: int = 10
    max_steps: int | None = None
    tr_ratio: int = 4
    dataset: str = "synthetic"

    def flat(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        d.update(self.model.to_dict())
        return d

    @classmethod
    def from_flat(cls, data: dict) -> "ExperimentConfig":
        mfields = {f.name for f in dataclasses.fields(ModelConfig)}
        efields = {f.name for f in dataclasses.fields(cls)} - {"model"}
        unknown = set(data) - mfields - efields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig(**{k: v for k, v in data.items() if k in mfields})
        return cls(model=model, **{k: v for k, v in data.items() if k in efields})


def _coerce(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(v)
    return out


def dump_config_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.flat().items())


def build_model(cfg: ModelConfig) -> RTTE:
    """Fresh model whose initial weights depend only on ``cfg.seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return RTTE(cfg)


# ------------------------------------------------------------------ training

@dataclass
class TrainState:
    model: RTTE
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    generator: torch.Generator
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: RTTE, seed: int) -> "TrainState":
        cfg = model.cfg
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
        gen = torch.Generator().manual_seed(seed)
        return cls(model, opt, np.random.default_rng(seed), gen)

    def save(self, path: str | Path) -> None:
        """Everything needed to resume bit-identically, in one ``.npz``."""
        arrays = {f"param/{k}": v.detach().numpy() for k, v in self.model.state_dict().items()}
        names = [n for n, _ in self.model.named_parameters()]
        opt_state = self.optimizer.state_dict()
        for idx, st in opt_state["state"].items():
            for key, val in st.items():
                arrays[f"opt/{names[idx]}/{key}"] = val.detach().numpy()
        arrays["torch_gen"] = self.generator.get_state().numpy()
        meta = {
            "config": self.model.cfg.to_dict(), "epoch": self.epoch, "step": self.step,
            "best_val": self.best_val, "best_epoch": self.best_epoch,
            "rng": self.rng.bit_generator.state, "history": self.history,
        }
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            files = {k: z[k] for k in z.files}
        cfg = ModelConfig.from_dict(meta["config"])
        model = RTTE(cfg)
        model.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in files.items() if k.startswith("param/")})
        st = cls.fresh(model, cfg.seed)
        names = [n for n, _ in model.named_parameters()]
        opt_sd = st.optimizer.state_dict()
        for idx, name in enumerate(names):
            keys = [k for k in files if k.startswith(f"opt/{name}/")]
            if keys:
                opt_sd["state"][idx] = {k.rsplit("/", 1)[1]: torch.from_numpy(files[k].copy()) for k in keys}
        st.optimizer.load_state_dict(opt_sd)
        st.generator.set_state(torch.from_numpy(files["torch_gen"].copy()))
        st.rng.bit_generator.state = meta["rng"]
        st.epoch, st.step = meta["epoch"], meta["step"]
        st.best_val, st.best_epoch, st.history = meta["best_val"], meta["best_epoch"], meta["history"]
        return st


InstanceMaker = Callable[[Trajectory, np.random.Generator], TaskInstance]


def _build_instances(trajs: Sequence[Trajectory], make: InstanceMaker, rng) -> list[TaskInstance]:
    out = []
    for t in trajs:
        try:
            out.append(make(t, rng))
        except TooShort:
            continue
    return out


def evaluation_instances(trajs: Sequence[Trajectory], make: InstanceMaker, seed: int) -> list[TaskInstance]:
    """Fixed masks for validation/loss probes (same seed -> same instances)."""
    return _build_instances(trajs, make, np.random.default_rng(seed))


@torch.no_grad()
def mean_loss(model: RTTE, featurizer: Featurizer, instances: Sequence[TaskInstance], batch_size: int,
              task_filter: str | None = None) -> float:
    """Eval-mode loss averaged over contributing positions of all instances."""
    if not instances:
        return math.nan
    tot, cnt = 0.0, 0
    w = model.cfg.spatial_loss_weight
    for i in range(0, len(instances), batch_size):
        batch = featurizer(instances[i:i + batch_size], model.dtype)
        out = model(batch)
        n = int((batch.xy_on | batch.t_on).sum())
        tot += float(batch_loss(out, batch, w, task_filter)) * n
        cnt += n
    return tot / cnt if cnt else math.nan


def train_loop(state: TrainState, featurizer: Featurizer, train: Sequence[Trajectory], make: InstanceMaker,
               epochs: int, val: Sequence[Trajectory] = (), patience: int = 10, max_steps: int | None = None,
               task_filter: str | None = None, val_seed: int = 12345,
               on_step: Callable[[int, float], None] | None = None) -> TrainState:
    """Shuffle, mask, forward, reconstruct, Adam step; early-stop on validation loss.

    The best-validation parameters are kept in ``state.best_params`` (the
    last ones when there is no validation data).
    """
    model, cfg = state.model, state.model.cfg
    if not train:
        raise DataEmpty("no training trajectories")
    val_instances = evaluation_instances(val, make, val_seed) if val else []
    start = state.epoch
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    first = state.step
    last = first + per_epoch * epochs if max_steps is None else min(first + per_epoch * epochs, max_steps)
    for epoch in range(start, start + epochs):
        model.train()
        order = state.rng.permutation(len(train))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            if max_steps is not None and state.step >= max_steps:
                break
            instances = _build_instances([train[i] for i in order[b:b + cfg.batch_size]], make, state.rng)
            if not instances:
                continue
            if cfg.lr_schedule == "cosine":
                frac = min((state.step - first) / max(last - first, 1), 1.0)
                for group in state.optimizer.param_groups:
                    group["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
            batch = featurizer(instances, model.dtype)
            out = model(batch, train_mode=True, generator=state.generator)
            loss = batch_loss(out, batch, cfg.spatial_loss_weight, task_filter)
            if cfg.aux_loss_coef:
                loss = loss + cfg.aux_loss_coef * out.aux_loss
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at step {state.step}")
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            state.step += 1
            losses.append(float(loss.detach()))
            if on_step:
                on_step(state.step, losses[-1])
        model.eval()
        state.epoch = epoch + 1
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = mean_loss(model, featurizer, val_instances, cfg.batch_size, task_filter) if val_instances else math.nan
        state.history.append({"epoch": epoch, "step": state.step, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d step %d train %.6f val %.6f", epoch, state.step, train_loss, val_loss)
        if val_instances:
            if val_loss < state.best_val:
                state.best_val, state.best_epoch = val_loss, epoch
                state.best_params = copy.deepcopy(model.state_dict())
            elif epoch - state.best_epoch >= patience:
                log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break
        if max_steps is not None and state.step >= max_steps:
            break
    if state.best_params is None or not val_instances:
        state.best_params = copy.deepcopy(model.state_dict())
    model.load_state_dict(state.best_params)
    return state


def pretrain(cfg: ExperimentConfig, ctx: RegionContext, train: Sequence[Trajectory],
             val: Sequence[Trajectory] = (), model: RTTE | None = None) -> TrainState:
    """Mask-and-recover pretraining on a mixture of span and modality masks."""
    model = model or build_model(cfg.model)
    state = TrainState.fresh(model, cfg.model.seed)
    return train_loop(state, Featurizer(ctx, cfg.model), train, pretrain_mask, cfg.pretrain_epochs, val,
                      cfg.patience, cfg.max_steps)


TASK_LOSS = {TaskKind.TP: None, TaskKind.TR: None, TaskKind.TTE: "temporal"}


def finetune(cfg: ExperimentConfig, model: RTTE, task: TaskKind | str, ctx: RegionContext,
             train: Sequence[Trajectory], val: Sequence[Trajectory] = ()) -> TrainState:
    """Task-specific fine-tuning; few-shot mode subsamples the training set with the run seed."""
    task = TaskKind(task)
    check_compatible(model.cfg, cfg.model)
    if cfg.transfer_mode == "few-shot" and len(train) > cfg.few_shot_n:
        idx = np.sort(np.random.default_rng(cfg.model.seed).choice(len(train), cfg.few_shot_n, replace=False))
        train = [train[i] for i in idx]
    state = TrainState.fresh(model, cfg.model.seed)
    if cfg.finetune_epochs <= 0:
        state.best_params = copy.deepcopy(model.state_dict())
        return state
    make = lambda t, rng: make_instance(t, task, cfg.tr_ratio, rng)
    return train_loop(state, Featurizer(ctx, cfg.model), train, make, cfg.finetune_epochs, val,
                      cfg.patience, cfg.max_steps, task_filter=TASK_LOSS[task])


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    task: str
    dataset: str
    seed: int
    rows: list  # (metric, value, n_samples)
    gates: GateStats

    def value(self, metric: str) -> float:
        for m, v, _ in self.rows:
            if m == metric:
                return v
        raise KeyError(metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "dataset", "metric", "value", "n_samples", "seed"])
        for m, v, n in self.rows:
            w.writerow([self.task, self.dataset, m, f"{v:.10g}", n, self.seed])
        return buf.getvalue()


@torch.no_grad()
def predict(model: RTTE, featurizer: Featurizer, instances: Sequence[TaskInstance], batch_size: int = 64,
            gates: GateStats | None = None):
    """Eval-mode predictions per instance; optionally accumulate last-layer routing stats."""
    model.eval()
    preds = []
    for i in range(0, len(instances), batch_size):
        batch = featurizer(instances[i:i + batch_size], model.dtype)
        out = model(batch)
        preds.extend(model.predictions(out, batch))
        if gates is not None:
            g = out.gates[-1].double().numpy()
            for b, dens in enumerate(batch.density):
                gates.add(g[b, : len(dens)], dens)
    return preds


def evaluate(model: RTTE, ctx: RegionContext, trajs: Sequence[Trajectory], task: TaskKind | str,
             tr_ratio: int = 4, dataset: str = "synthetic", batch_size: int | None = None) -> EvalReport:
    """Build test instances for ``task``, predict in eval mode, score.

    TP scores the destination only (per-point scores are extra rows); TR
    scores every masked point and also reports the linear-interpolation
    baseline; TTE scores minutes and excludes trips under one minute from
    MAPE.
    """
    task = TaskKind(task)
    cfg = model.cfg
    featurizer = Featurizer(ctx, cfg)
    instances = _build_instances(trajs, lambda t, rng: make_instance(t, task, tr_ratio, rng),
                                 np.random.default_rng(cfg.seed))
    if not instances:
        raise DataEmpty(f"no trajectories usable for {task.value}")
    gates = GateStats.empty(cfg.n_experts)
    preds = predict(model, featurizer, instances, batch_size or cfg.batch_size, gates)
    rows = []
    if task is TaskKind.TP:
        dest_p = [p[-1].lnglat_hat for p in preds]
        dest_t = [inst.target_locs[-1] for inst in instances]
        m = metrics(dest_p, dest_t, "spatial")
        rows += [(k, v, len(dest_p)) for k, v in m.items()]
        all_p, all_t = [], []
        for p, inst in zip(preds, instances):
            for i in masked_positions(inst):
                all_p.append(p[i].lnglat_hat)
                all_t.append(inst.target_locs[i])
        rows += [(f"{k}_all_points", v, len(all_p)) for k, v in metrics(all_p, all_t, "spatial").items()]
    elif task is TaskKind.TR:
        mp, mt, bp = [], [], []
        for p, inst in zip(preds, instances):
            base = linear_interp_baseline(inst)
            for i in masked_positions(inst):
                mp.append(p[i].lnglat_hat)
                mt.append(inst.target_locs[i])
                bp.append(base[i])
        rows += [(k, v, len(mp)) for k, v in metrics(mp, mt, "spatial").items()]
        rows += [(f"{k}_linear", v, len(bp)) for k, v in metrics(bp, mt, "spatial").items()]
    else:
        pred_t = [extract_travel_time(p[-1]) for p in preds]
        true_t = [inst.temporal_targets[-1][3] for inst in instances]
        m = metrics(pred_t, true_t, "time", with_mape=False)
        keep = [i for i, t in enumerate(true_t) if t >= MAPE_MIN_MINUTES]
        m["MAPE"] = metrics([pred_t[i] for i in keep], [true_t[i] for i in keep], "time")["MAPE"] if keep else math.nan
        rows += [(k, v, len(keep) if k == "MAPE" else len(pred_t)) for k, v in m.items()]
    return EvalReport(task.value, dataset, cfg.seed, rows, gates)
