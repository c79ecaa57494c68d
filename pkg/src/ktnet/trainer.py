"""Losses, the three-phase update schedule, and the training loop.

Each iteration runs, in order:

1. discriminator update on detached features (step size 2 * gamma),
2. teacher update from the EMD reconstruction loss,
3. student update from lambda_g * L_G + lambda_p * L_student, with the
   transfer layers and decoder shielded by ``detach``.

Every phase does its own forward pass so it sees the parameters left by
the previous phase.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import metrics as M
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import KTNet, ModelConfig
from .pointcloud import DatasetSplit, PointCloud, as_points, resample
from .tensor import Adam, ConfigError, Tensor, optimizer_step

ABLATIONS = frozenset({"no_kra", "no_kda", "no_residual", "no_lstudent", "only_global",
                       "grad_all_student", "grad_all_g"})


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1e-4
    lambda_g: float = 0.1
    lambda_p: float = 1.0
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    emd_mode: str = "exact"
    emd_epsilon: float = 0.01
    ablation: frozenset = frozenset()
    k: int = 256
    n: int = 3
    n_out: int = 256
    enc_widths: tuple = (128, 256)
    dec_hidden: int = 512
    disc_widths: tuple = (256, 64)
    checkpoint_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        object.__setattr__(self, "enc_widths", tuple(self.enc_widths))
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))
        unknown = self.ablation - ABLATIONS
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}; expected some of {sorted(ABLATIONS)}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.lambda_g < 0 or self.lambda_p < 0:
            raise ConfigError("lambda_g and lambda_p must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.emd_mode not in ("exact", "approx"):
            raise ConfigError(f"emd_mode must be 'exact' or 'approx', got {self.emd_mode!r}")
        if {"no_kda", "no_lstudent"} <= self.ablation:
            raise ConfigError("no_kda together with no_lstudent leaves the student without a loss")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            k=self.k, n=0 if "only_global" in self.ablation else self.n, n_out=self.n_out,
            enc_widths=self.enc_widths, dec_hidden=self.dec_hidden, disc_widths=self.disc_widths,
            use_kra="no_kra" not in self.ablation, use_residual="no_residual" not in self.ablation)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = sorted(self.ablation)
        d["enc_widths"] = list(self.enc_widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": {},
    # full-scale settings: 2048-point shapes, batch 32, 600 epochs; k sized like common completion encoders
    "paper": {"gamma": 1e-4, "batch_size": 32, "epochs": 600, "n_out": 2048, "k": 1024, "emd_mode": "approx"},
}


class StepLosses(NamedTuple):
    L_D: float
    L_G: float
    L_teacher: float
    L_student: float


@dataclass
class TrainState:
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    optimizers: dict[str, Adam] = field(default_factory=lambda: {k: Adam() for k in ("disc", "teacher", "student")})
    running: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: TrainConfig) -> TrainState:
        return cls(rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED])))


# ------------------------------------------------------------------ losses

def _n_stages(model: KTNet) -> int:
    return len(model.config.transfer_stages)


def loss_d(model: KTNet, f_x_list: Sequence[Tensor], f_y_list: Sequence[Tensor]) -> Tensor:
    """LSGAN discriminator loss: teacher features -> 1, student features -> 0."""
    n = _n_stages(model)
    if len(f_x_list) != n or len(f_y_list) != n:
        raise ValueError(f"expected {n} stage features per path, got {len(f_x_list)} and {len(f_y_list)}")
    total = None
    for s, fx, fy in zip(model.config.transfer_stages, f_x_list, f_y_list):
        sx = model.kda_score(s, T.detach(fx))
        sy = model.kda_score(s, T.detach(fy))
        term = T.mean_all(T.square(sx)) + T.mean_all(T.square(sy - 1.0))
        total = term if total is None else total + term
    return total * (1.0 / (2 * n))


def loss_g(model: KTNet, f_x_list: Sequence[Tensor]) -> Tensor:
    """Adversarial loss for the student; discriminator weights are read detached."""
    n = _n_stages(model)
    if len(f_x_list) != n:
        raise ValueError(f"expected {n} stage features, got {len(f_x_list)}")
    total = None
    for s, fx in zip(model.config.transfer_stages, f_x_list):
        term = T.mean_all(T.square(model.kda_score(s, fx, detach_params=True) - 1.0))
        total = term if total is None else total + term
    return total * (1.0 / n)


def loss_teacher(Y_in: Sequence, Y_c: Tensor, mode: str = "exact", epsilon: float = 0.01,
                 perms: Sequence[np.ndarray] | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Mean EMD between inputs and reconstructions [B, N, 3].

    The matching is solved on detached values and then held fixed, so the
    gradient is that of the matched-distance sum. Returns the loss and the
    per-sample matchings (pass them back via ``perms`` to freeze them).
    """
    B, N, _ = Y_c.shape
    targets = [as_points(y) for y in Y_in]
    if len(targets) != B or any(len(y) != N for y in targets):
        raise ValueError(f"loss_teacher needs {B} clouds of exactly {N} points")
    if perms is None:
        perms = [M.emd(y, Y_c.data[b], mode, epsilon).perm for b, y in enumerate(targets)]
    flat = np.concatenate([b * N + np.asarray(p) for b, p in enumerate(perms)])
    matched = T.gather_rows(T.reshape(Y_c, (B * N, 3)), flat)
    dist = T.row_norm(matched - np.concatenate(targets, axis=0))
    return T.mean_all(dist), list(perms)


def loss_student(X_in: Sequence, X_c: Tensor, index: Sequence[np.ndarray] | None = None) -> Tensor:
    """Mean one-sided Chamfer distance from each partial input to its prediction."""
    B, N, _ = X_c.shape
    sources = [as_points(x) for x in X_in]
    if len(sources) != B:
        raise ValueError(f"loss_student got {len(sources)} inputs for {B} predictions")
    if index is None:
        index = [M.nearest(x, X_c.data[b])[0] for b, x in enumerate(sources)]
    flat = np.concatenate([b * N + np.asarray(i) for b, i in enumerate(index)])
    weights = np.concatenate([np.full(len(x), 1.0 / (B * len(x))) for x in sources])
    matched = T.gather_rows(T.reshape(X_c, (B * N, 3)), flat)
    sq = T.sum_rows(T.square(matched - np.concatenate(sources, axis=0)))
    return T.sum_all(T.mul(sq, weights))


def _check_finite(name: str, value: float, state: TrainState, phase: int):
    if not math.isfinite(value):
        raise TrainingError(f"{name} became {value} at step {state.step} (epoch {state.epoch}, phase {phase})")


# ------------------------------------------------------------------- steps

def phase_discriminator(model: KTNet, batch_partial, batch_complete, config: TrainConfig,
                        state: TrainState) -> float:
    with T.no_grad():
        f_y = model.kt_teacher(model.encode(batch_complete))
        f_x = model.kt_student(model.encode(batch_partial))
    L_D = loss_d(model, f_x, f_y)
    _check_finite("L_D", L_D.item(), state, 1)
    T.backward(L_D)
    optimizer_step(state.optimizers["disc"], model.groups["theta_D"], 2.0 * config.gamma)
    return L_D.item()


def phase_teacher(model: KTNet, batch_complete, config: TrainConfig, state: TrainState) -> float:
    Y_c = model.teacher_forward(batch_complete)
    if not np.all(np.isfinite(Y_c.data)):
        # the matching solver cannot take non-finite costs, so check before it runs
        _check_finite("teacher reconstruction", float("nan"), state, 2)
    L_t, _ = loss_teacher(batch_complete, Y_c, config.emd_mode, config.emd_epsilon)
    _check_finite("L_teacher", L_t.item(), state, 2)
    T.backward(L_t)
    g = model.groups
    optimizer_step(state.optimizers["teacher"], [g["theta_FE"], g["theta_KT"], g["theta_MLP"]], config.gamma)
    return L_t.item()


def student_objective(model: KTNet, batch_partial, config: TrainConfig) -> tuple[Tensor, float, float]:
    """Phase-3 objective; returns (total, L_G, L_student) with L_G = nan when disabled."""
    flags = config.ablation
    attach_s = "grad_all_student" in flags
    attach_g = "grad_all_g" in flags
    f_x = model.encode(batch_partial)
    feats_s = model.kt_student(f_x, attach_kt=attach_s)
    feats_g = feats_s if attach_g == attach_s else model.kt_student(f_x, attach_kt=attach_g)
    total = None
    L_G = float("nan")
    if "no_kda" not in flags:
        lg = loss_g(model, feats_g)
        L_G = lg.item()
        total = lg * config.lambda_g
    X_c = model.restore(feats_s[-1], detach_params=True)
    ls = loss_student(batch_partial, X_c)
    if "no_lstudent" not in flags:
        term = ls * config.lambda_p
        total = term if total is None else total + term
    return total, L_G, ls.item()


def phase_student(model: KTNet, batch_partial, config: TrainConfig, state: TrainState) -> tuple[float, float]:
    total, L_G, L_s = student_objective(model, batch_partial, config)
    if "no_kda" not in config.ablation:
        _check_finite("L_G", L_G, state, 3)
    _check_finite("L_student", L_s, state, 3)
    T.backward(total)
    g = model.groups
    groups = [g["theta_FE"], g["theta_KRA"]]
    if {"grad_all_student", "grad_all_g"} & config.ablation:
        groups.append(g["theta_KT"])
    optimizer_step(state.optimizers["student"], groups, config.gamma)
    return L_G, L_s


def train_step(model: KTNet, batch_partial, batch_complete, config: TrainConfig,
               state: TrainState) -> StepLosses:
    L_D = float("nan")
    if "no_kda" not in config.ablation:
        L_D = phase_discriminator(model, batch_partial, batch_complete, config, state)
    L_t = phase_teacher(model, batch_complete, config, state)
    L_G, L_s = phase_student(model, batch_partial, config, state)
    state.step += 1
    return StepLosses(L_D, L_G, L_t, L_s)


# ---------------------------------------------------------------- evaluation

def evaluate(model: KTNet, pairs: Sequence[tuple[PointCloud, PointCloud]], metrics=("cd",),
             batch_size: int = 32) -> M.MetricReport:
    report = M.MetricReport(tuple(metrics))
    if not pairs:
        return report
    preds = model.complete([p for p, _ in pairs], batch_size)
    for (partial, gt), pred in zip(pairs, preds):
        report.add(gt.category, **M.evaluate_pair(metrics, pred, gt, source=partial))
    return report


def identity_prediction(partial, n_out: int) -> np.ndarray:
    """The partial input cyclically repeated to ``n_out`` points."""
    return np.resize(as_points(partial), (n_out, 3))


def identity_baseline(pairs, n_out: int, metrics=("cd",)) -> M.MetricReport:
    report = M.MetricReport(tuple(metrics))
    for partial, gt in pairs:
        report.add(gt.category, **M.evaluate_pair(metrics, identity_prediction(partial, n_out), gt, source=partial))
    return report


# ----------------------------------------------------------- checkpointing

def checkpoint_arrays(model: KTNet, state: TrainState | None) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    if state is not None:
        for oname, opt in state.optimizers.items():
            for pname, m in opt.m.items():
                arrays[f"opt/{oname}/m/{pname}"] = m
                arrays[f"opt/{oname}/v/{pname}"] = opt.v[pname]
    return arrays


def write_checkpoint(path, model: KTNet, config: TrainConfig | None, state: TrainState | None,
                     category: str | None = None):
    header = {"format": "ktnet", "category": category, "model": model.config.to_dict(),
              "train_config": config.to_dict() if config else None}
    if state is not None:
        header["state"] = {
            "step": state.step, "epoch": state.epoch, "rng": state.rng.bit_generator.state,
            "opt_steps": {k: o.t for k, o in state.optimizers.items()},
            "running": state.running,
        }
    save_checkpoint(path, header, checkpoint_arrays(model, state))


def model_from_checkpoint(path) -> tuple[KTNet, dict]:
    header, arrays = load_checkpoint(path)
    if header.get("format") != "ktnet" or "model" not in header:
        raise CheckpointError(f"{path}: header lacks model hyperparameters")
    model = KTNet(ModelConfig.from_dict(header["model"]))
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_arrays(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: architecture mismatch: {e}") from None
    return model, header


def restore_state(header: dict, arrays: dict[str, np.ndarray]) -> TrainState:
    st = header.get("state")
    if st is None:
        raise CheckpointError("checkpoint carries no training state; cannot resume")
    rng = np.random.default_rng()
    rng.bit_generator.state = st["rng"]
    state = TrainState(rng=rng, step=st["step"], epoch=st["epoch"], running=dict(st["running"]))
    for oname, opt in state.optimizers.items():
        opt.t = st["opt_steps"][oname]
        prefix = f"opt/{oname}/m/"
        for key, val in arrays.items():
            if key.startswith(prefix):
                pname = key[len(prefix):]
                opt.m[pname] = val.copy()
                opt.v[pname] = arrays[f"opt/{oname}/v/{pname}"].copy()
    return state


# --------------------------------------------------------------- training

LOG_COLUMNS = ("step", "epoch", "L_D", "L_G", "L_teacher", "L_student")


def _write_log(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


@dataclass
class FitResult:
    checkpoint: Path
    log_path: Path
    log: list[dict]
    initial_report: M.MetricReport
    final_report: M.MetricReport
    model: KTNet

    @property
    def initial_cd(self) -> float:
        return self.initial_report.average()["cd"]

    @property
    def final_cd(self) -> float:
        return self.final_report.average()["cd"]


def _single_category(dataset: DatasetSplit) -> str:
    cats = dataset.categories()
    if len(cats) != 1:
        raise ValueError(f"fit trains one category at a time; dataset has {cats}")
    if not dataset.complete_train or not dataset.partial_train:
        raise ValueError("fit needs both complete and partial training clouds")
    return cats[0]


def fit(dataset: DatasetSplit, config: TrainConfig, out_dir, resume=None,
        progress: Callable[[int, StepLosses], None] | None = None) -> FitResult:
    """Train one category; writes checkpoints, ``loss_log.csv`` and metric CSVs to ``out_dir``."""
    category = _single_category(dataset)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"

    model = KTNet(config.model_config(), seed=config.seed)
    prep_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0DE]))
    complete = [resample(c.points, config.n_out, prep_rng) for c in dataset.complete_train]
    partial = [c.points for c in dataset.partial_train]
    pairs = dataset.paired_test
    initial_report = evaluate(model, pairs)

    rows: list[dict] = []
    if resume is not None:
        header, arrays = load_checkpoint(resume)
        saved = header.get("train_config") or {}
        mismatched = [k for k, v in config.to_dict().items() if k not in ("epochs", "checkpoint_every")
                      and saved.get(k) != v]
        if mismatched:
            raise CheckpointError(f"{resume}: config differs from the checkpoint in {mismatched}")
        model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        state = restore_state(header, arrays)
        if log_path.exists():
            rows = [r for r in read_log(log_path) if r["step"] <= state.step]
    else:
        state = TrainState.fresh(config)

    nc, npart = len(complete), len(partial)
    bs = config.batch_size
    steps_per_epoch = math.ceil(max(nc, npart) / bs)
    while state.epoch < config.epochs:
        perm_c = state.rng.permutation(nc)
        perm_p = state.rng.permutation(npart)
        sums = {k: 0.0 for k in LOG_COLUMNS[2:]}
        for s in range(steps_per_epoch):
            j = np.arange(s * bs, min((s + 1) * bs, max(nc, npart)))
            bc = [complete[i] for i in perm_c[j % nc]]
            bp = [partial[i] for i in perm_p[j % npart]]
            losses = train_step(model, bp, bc, config, state)
            rows.append({"step": state.step, "epoch": state.epoch, **losses._asdict()})
            for k, v in losses._asdict().items():
                sums[k] += v
            if progress is not None:
                progress(state.step, losses)
        state.epoch += 1
        state.running = {k: v / steps_per_epoch for k, v in sums.items()}
        if state.epoch % config.checkpoint_every == 0:
            write_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:04d}.ckpt", model, config, state, category)
            _write_log(log_path, rows)

    final_ckpt = out / "final.ckpt"
    write_checkpoint(final_ckpt, model, config, state, category)
    _write_log(log_path, rows)
    final_report = evaluate(model, pairs)
    initial_report.to_csv(out / "metrics_initial.csv")
    final_report.to_csv(out / "metrics.csv")
    return FitResult(final_ckpt, log_path, rows, initial_report, final_report, model)


# ---------------------------------------------------------------- features

FEATURE_PATHS = ("teacher", "student-raw", "student-enhanced")


def dump_features(model: KTNet, clouds: Sequence[PointCloud]) -> list[dict]:
    """Per-stage latent features for external visualisation.

    Complete clouds give ``teacher`` rows; partial clouds give
    ``student-raw`` (recovery units bypassed) and ``student-enhanced`` rows.
    """
    rows = []
    with T.no_grad():
        for i, cloud in enumerate(clouds):
            cid = cloud.instance_id or f"cloud-{i}"
            f = model.encode([cloud])
            if cloud.role.value == "complete":
                stages = [f] + (model.kt_teacher(f) if model.config.n > 0 else [])
                rows += [_feature_row(cid, cloud, "teacher", s, t) for s, t in enumerate(stages)]
            else:
                sf = model.kt_student_features(f)
                raw = sf.raw if model.config.n == 0 else [f] + sf.raw
                enh = sf.enhanced if model.config.n == 0 else [f] + sf.enhanced
                rows += [_feature_row(cid, cloud, "student-raw", s, t) for s, t in enumerate(raw)]
                rows += [_feature_row(cid, cloud, "student-enhanced", s, t) for s, t in enumerate(enh)]
    return rows


def _feature_row(cid, cloud, path, stage, t: Tensor) -> dict:
    return {"cloud_id": cid, "category": cloud.category, "path": path, "stage": stage,
            "values": t.data.reshape(-1).copy()}


def write_features_csv(rows: list[dict], path):
    width = max(len(r["values"]) for r in rows) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "category", "path", "stage", "dim", *[f"v{j}" for j in range(width)]])
        for r in rows:
            vals = [repr(float(v)) for v in r["values"]]
            w.writerow([r["cloud_id"], r["category"], r["path"], r["stage"], len(vals),
                        *vals, *[""] * (width - len(vals))])


def read_features_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            dim = int(r["dim"])
            out.append({"cloud_id": r["cloud_id"], "category": r["category"], "path": r["path"],
                        "stage": int(r["stage"]),
                        "values": np.array([float(r[f"v{j}"]) for j in range(dim)])})
        return out


def feature_alignment(model: KTNet, pairs: Sequence[tuple[PointCloud, PointCloud]]) -> tuple[float, float]:
    """Mean distance of final-stage student features to the paired teacher feature.

    Returns ``(enhanced_to_teacher, raw_to_teacher)``.
    """
    with T.no_grad():
        ft = model.kt_teacher(model.encode([g for _, g in pairs]))[-1].data
        sf = model.kt_student_features(model.encode([p for p, _ in pairs]))
    d_enh = np.linalg.norm(sf.enhanced[-1].data - ft, axis=1).mean()
    d_raw = np.linalg.norm(sf.raw[-1].data - ft, axis=1).mean()
    return float(d_enh), float(d_raw)


def load_config(path=None, preset: str | None = None, **overrides) -> TrainConfig:
    """Preset, then JSON file, then explicit overrides (later wins)."""
    d: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        d.update(PRESETS[preset])
    if path is not None:
        d.update(json.loads(Path(path).read_text()))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)
